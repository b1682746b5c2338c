#![allow(dead_code)]

use hact_core::model::{build_model, Model, StackConfig, NUM_STACKS};
use hact_core::pruning::{apply_mask, filter_norms, select, PruneVariant};
use hact_core::tensor::{BatchNormMode, Conv3dGeometry, Graph, RunningStats, Tensor};
use hact_core::Mode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| n.sample(&mut rng))
}

pub fn pick(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    let s = t.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * s[axis] + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[axis] = keep.len();
    Tensor::new(shape, data).unwrap()
}

/// Surviving channels of an activation; `data` is `None` when every channel is pruned.
pub struct Act {
    data: Option<Tensor>,
    dims: [usize; 4],
    keep: Vec<usize>,
}

impl Act {
    fn full(t: Tensor) -> Act {
        let s = t.shape();
        Act {
            dims: [s[0], s[2], s[3], s[4]],
            keep: (0..s[1]).collect(),
            data: Some(t),
        }
    }

    /// Back to `[N, width, T, H, W]`, zeros in the removed channels.
    fn scatter(&self, width: usize) -> Tensor {
        let [n, t, h, w] = self.dims;
        let inner = t * h * w;
        let mut out = Tensor::zeros(&[n, width, t, h, w]);
        if let Some(d) = &self.data {
            for b in 0..n {
                for (i, &k) in self.keep.iter().enumerate() {
                    let src = (b * self.keep.len() + i) * inner;
                    let dst = (b * width + k) * inner;
                    out.data_mut()[dst..dst + inner].copy_from_slice(&d.data()[src..src + inner]);
                }
            }
        }
        out
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect()).unwrap()
}

/// Logits of the network with every pruned filter physically removed: pruned
/// output channels are dropped from each convolution, its normalization and
/// the input channels of the convolution that consumes it. Residual sums
/// scatter the surviving channels back to full width.
pub fn removed_forward(model: &Model, x: &Tensor) -> Vec<Tensor> {
    let layers: Vec<_> = std::iter::once(model.stem()).chain(model.prunable_layers()).collect();
    let stats = model.running_stats();
    let alive = |li: usize| -> Vec<usize> {
        if li == 0 {
            return (0..layers[0].out_channels()).collect();
        }
        let dead = &model.pruned().layers()[li - 1];
        (0..dead.len()).filter(|&c| !dead[c]).collect()
    };
    let conv_bn = |li: usize, input: &Act| -> Act {
        let l = layers[li];
        let keep = alive(li);
        let [n, t, h, w] = input.dims;
        let k = l.weight.shape();
        let geom = Conv3dGeometry::new(&[n, 1, t, h, w], &[1, 1, k[2], k[3], k[4]], l.stride, l.padding).unwrap();
        let dims = [n, geom.output[0], geom.output[1], geom.output[2]];
        if keep.is_empty() {
            return Act { data: None, dims, keep };
        }
        let (xin, wt) = match &input.data {
            Some(d) => (d.clone(), pick(&pick(&l.weight, 0, &keep), 1, &input.keep)),
            None => (Tensor::zeros(&[n, 1, t, h, w]), Tensor::zeros(&[keep.len(), 1, k[2], k[3], k[4]])),
        };
        let mut g = Graph::inference();
        let xv = g.constant(xin);
        let wv = g.constant(wt);
        let bv = g.constant(pick(&l.bias, 0, &keep));
        let c = g.conv3d(xv, wv, bv, l.stride, l.padding).unwrap();
        let mut st = RunningStats {
            mean: keep.iter().map(|&k| stats[li].mean[k]).collect(),
            var: keep.iter().map(|&k| stats[li].var[k]).collect(),
            ..stats[li].clone()
        };
        let gv = g.constant(pick(&l.gamma, 0, &keep));
        let ev = g.constant(pick(&l.beta, 0, &keep));
        let y = g.batch_norm(c, gv, ev, &mut st, BatchNormMode::Eval).unwrap();
        Act { data: Some(g.value(y).clone()), dims, keep }
    };
    let relu_act = |a: Act| Act { data: a.data.as_ref().map(relu), ..a };

    let stem = conv_bn(0, &Act::full(x.clone()));
    let mut h = relu(&stem.scatter(layers[0].out_channels()));
    let mut li = 1;
    let mut logits = Vec::new();
    let convs = if model.config().bottleneck { 3 } else { 2 };
    for s in 0..NUM_STACKS {
        for _ in 0..model.config().blocks_per_stack[s] {
            let block_in = Act::full(h.clone());
            let mut y = conv_bn(li, &block_in);
            li += 1;
            for _ in 1..convs {
                y = conv_bn(li, &relu_act(y));
                li += 1;
            }
            let width = layers[li - 1].out_channels();
            let skip = if layers.get(li).is_some_and(|l| l.name.ends_with("shortcut")) {
                li += 1;
                conv_bn(li - 1, &block_in).scatter(width)
            } else {
                h.clone()
            };
            let y = y.scatter(width);
            h = relu(&Tensor::new(y.shape().to_vec(), y.data().iter().zip(skip.data()).map(|(u, v)| u + v).collect()).unwrap());
        }
        let cell: usize = h.shape()[2..].iter().product();
        let pooled: Vec<f64> = h.data().chunks(cell).map(|c| c.iter().sum::<f64>() / cell as f64).collect();
        let head = &model.heads()[s];
        let (n, f) = (h.shape()[0], h.shape()[1]);
        let k = head.weight.shape()[0];
        let mut z = vec![0.0; n * k];
        for i in 0..n {
            for o in 0..k {
                z[i * k + o] = head.bias.data()[o] + (0..f).map(|c| pooled[i * f + c] * head.weight.data()[o * f + c]).sum::<f64>();
            }
        }
        logits.push(Tensor::new(vec![n, k], z).unwrap());
    }
    logits
}

pub fn trained_like(cfg: &StackConfig, seed: u64) -> Model {
    let mut model = build_model(cfg, seed).unwrap();
    // Perturb every parameter and populate running statistics with a few train-mode passes.
    for (i, p) in model.parameters_mut().into_iter().enumerate() {
        let noise = randn(p.shape(), seed * 1000 + i as u64);
        for (v, e) in p.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * e;
        }
    }
    for k in 0..3 {
        let mut g = Graph::new();
        let x = g.constant(randn(&[3, cfg.in_channels, 4, 16, 16], seed + 77 + k));
        model.forward(&mut g, x, Mode::Train).unwrap();
    }
    model.record_training(1);
    model
}

pub fn masked_logits(model: &Model, x: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let out = model.forward_eval(&mut g, xv).unwrap();
    out.logits.iter().map(|&v| g.value(v).clone()).collect()
}

/// Largest absolute logit difference between the masked model and the
/// removed-filter oracle after `passes` rounds of pruning at rate `p`.
pub fn masked_removed_gap(cfg: &StackConfig, seed: u64, variant: PruneVariant, p: f64, passes: usize) -> f64 {
    let mut model = trained_like(cfg, seed);
    for _ in 0..passes {
        let delta = select(variant, &filter_norms(&model), p, model.pruned()).unwrap();
        apply_mask(&mut model, &delta).unwrap();
    }
    assert!(model.pruned().pruned_count() > 0);
    let x = randn(&[2, cfg.in_channels, 4, 16, 16], seed + 5);
    logit_gap(&masked_logits(&model, &x), &removed_forward(&model, &x))
}

pub fn logit_gap(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (u, v) in a.iter().zip(b) {
        assert_eq!(u.shape(), v.shape());
        for (x, y) in u.data().iter().zip(v.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}
