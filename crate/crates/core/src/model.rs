//! Scaled-down inflated residual classifier with one head per stack.
//!
//! A 2D stem (temporal extent 1) is followed by four stacks of residual blocks
//! whose kernels are inflated from 2D initializations. After each stack the
//! features are averaged over time and space and fed to a linear head, so
//! head `l` only sees stacks `0..=l`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::tensor::{BatchNormMode, Graph, RunningStats, Tensor, Var};
use crate::Mode;

pub const NUM_STACKS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub in_channels: usize,
    pub blocks_per_stack: [usize; NUM_STACKS],
    pub base_channels: usize,
    pub bottleneck: bool,
    pub temporal_kernel: usize,
    /// Output width of each head; the last one is the number of original classes.
    pub num_classes_per_head: [usize; NUM_STACKS],
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            in_channels: 1,
            blocks_per_stack: [1; NUM_STACKS],
            base_channels: 8,
            bottleneck: true,
            temporal_kernel: 3,
            num_classes_per_head: [2, 4, 4, 8],
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.blocks_per_stack.contains(&0) {
            return Err(Error::Config(format!(
                "every stack needs at least one block, got {:?}",
                self.blocks_per_stack
            )));
        }
        if self.temporal_kernel == 0 {
            return Err(Error::Config("temporal kernel must be at least 1".into()));
        }
        let heads = &self.num_classes_per_head;
        if heads.contains(&0) || heads.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "head widths must be positive and nondecreasing, got {heads:?}"
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes_per_head[NUM_STACKS - 1]
    }

    /// Bottleneck width of stack `s`.
    fn mid_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    pub fn stack_out_channels(&self, s: usize) -> usize {
        if self.bottleneck {
            2 * self.mid_channels(s)
        } else {
            self.mid_channels(s)
        }
    }

    fn stack_stride(s: usize) -> [usize; 3] {
        match s {
            0 => [1, 1, 1],
            1 => [1, 2, 2],
            _ => [2, 2, 2],
        }
    }
}

/// Replicate a 2D kernel `kt` times along a new temporal axis and divide by `kt`.
pub fn inflate_kernel(weight2d: &Tensor, kt: usize) -> Result<Tensor> {
    if kt == 0 {
        return Err(Error::Config("inflation needs a temporal extent of at least 1".into()));
    }
    let s = weight2d.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("inflate_kernel expects [Co,Ci,kH,kW], got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut out = Vec::with_capacity(weight2d.numel() * kt);
    for filter in weight2d.data().chunks(plane) {
        for _ in 0..kt {
            out.extend(filter.iter().map(|v| v / kt as f64));
        }
    }
    Tensor::new(vec![s[0], s[1], kt, s[2], s[3]], out)
}

/// A convolution followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvBn {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    stack: usize,
    convs: Vec<usize>,
    shortcut: Option<usize>,
}

/// Vars produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Parameter leaves in [`Model::parameters`] order.
    pub params: Vec<Var>,
    pub logits: [Var; NUM_STACKS],
    pub stack_outputs: [Var; NUM_STACKS],
    /// Output of the last convolution of stack 1 (before its normalization).
    pub stack1_last_conv: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: StackConfig,
    /// `layers[0]` is the stem; the rest belong to the stacks.
    layers: Vec<ConvBn>,
    running: Vec<RunningStats>,
    blocks: Vec<Block>,
    heads: Vec<LinearHead>,
    pruned: PruneMask,
    trained_epochs: usize,
}

fn kaiming_2d(rng: &mut ChaCha8Rng, co: usize, ci: usize, kh: usize, kw: usize) -> Tensor {
    let std = (2.0 / (ci * kh * kw) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(&[co, ci, kh, kw], |_| normal.sample(rng))
}

fn conv_bn(
    rng: &mut ChaCha8Rng,
    name: String,
    ci: usize,
    co: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
) -> Result<ConvBn> {
    let weight = inflate_kernel(&kaiming_2d(rng, co, ci, kernel[1], kernel[2]), kernel[0])?;
    Ok(ConvBn {
        name,
        weight,
        bias: Tensor::zeros(&[co]),
        gamma: Tensor::full(&[co], 1.0),
        beta: Tensor::zeros(&[co]),
        stride,
        padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
    })
}

/// Build a model with fan-in scaled normal initialization drawn from `seed`.
pub fn build_model(config: &StackConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kt = config.temporal_kernel;
    let mut layers = vec![conv_bn(
        &mut rng,
        "stem".into(),
        config.in_channels,
        config.base_channels,
        [1, 3, 3],
        [1, 2, 2],
    )?];
    let mut blocks = Vec::new();
    let mut channels = config.base_channels;
    for s in 0..NUM_STACKS {
        let mid = config.mid_channels(s);
        let out = config.stack_out_channels(s);
        for b in 0..config.blocks_per_stack[s] {
            let stride = if b == 0 { StackConfig::stack_stride(s) } else { [1, 1, 1] };
            let prefix = format!("stack{}.block{}", s + 1, b + 1);
            let specs: Vec<(usize, usize, [usize; 3], [usize; 3])> = if config.bottleneck {
                vec![
                    (channels, mid, [1, 1, 1], [1, 1, 1]),
                    (mid, mid, [kt, 3, 3], stride),
                    (mid, out, [1, 1, 1], [1, 1, 1]),
                ]
            } else {
                vec![(channels, out, [kt, 3, 3], stride), (out, out, [kt, 3, 3], [1, 1, 1])]
            };
            let mut convs = Vec::new();
            for (i, (ci, co, kernel, st)) in specs.into_iter().enumerate() {
                layers.push(conv_bn(&mut rng, format!("{prefix}.conv{}", i + 1), ci, co, kernel, st)?);
                convs.push(layers.len() - 1);
            }
            let shortcut = if channels != out || stride != [1, 1, 1] {
                layers.push(conv_bn(&mut rng, format!("{prefix}.shortcut"), channels, out, [1, 1, 1], stride)?);
                Some(layers.len() - 1)
            } else {
                None
            };
            blocks.push(Block {
                stack: s,
                convs,
                shortcut,
            });
            channels = out;
        }
    }
    let mut heads = Vec::with_capacity(NUM_STACKS);
    for s in 0..NUM_STACKS {
        let f = config.stack_out_channels(s);
        let k = config.num_classes_per_head[s];
        let normal = Normal::new(0.0, (1.0 / f as f64).sqrt()).expect("finite std");
        heads.push(LinearHead {
            name: format!("head{}", s + 1),
            weight: Tensor::from_fn(&[k, f], |_| normal.sample(&mut rng)),
            bias: Tensor::zeros(&[k]),
        });
    }
    let running = layers.iter().map(|l| RunningStats::new(l.out_channels())).collect();
    let pruned = PruneMask::empty(&layers[1..].iter().map(ConvBn::out_channels).collect::<Vec<_>>());
    Ok(Model {
        config: config.clone(),
        layers,
        running,
        blocks,
        heads,
        pruned,
        trained_epochs: 0,
    })
}

impl Model {
    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn stem(&self) -> &ConvBn {
        &self.layers[0]
    }

    /// Convolution layers inside the four stacks, in construction order.
    pub fn prunable_layers(&self) -> &[ConvBn] {
        &self.layers[1..]
    }

    pub fn heads(&self) -> &[LinearHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [LinearHead] {
        &mut self.heads
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn pruned(&self) -> &PruneMask {
        &self.pruned
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn record_training(&mut self, epochs: usize) {
        self.trained_epochs += epochs;
    }

    /// Names of the layers `pruned()` refers to, in mask order.
    pub fn prunable_names(&self) -> Vec<String> {
        self.prunable_layers().iter().map(|l| l.name.clone()).collect()
    }

    /// Zero every head's weights and biases.
    pub fn zero_heads(&mut self) {
        for h in &mut self.heads {
            h.weight.data_mut().fill(0.0);
            h.bias.data_mut().fill(0.0);
        }
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push((format!("{}.weight", l.name), &l.weight));
            out.push((format!("{}.bias", l.name), &l.bias));
            out.push((format!("{}.gamma", l.name), &l.gamma));
            out.push((format!("{}.beta", l.name), &l.beta));
        }
        for h in &self.heads {
            out.push((format!("{}.weight", h.name), &h.weight));
            out.push((format!("{}.bias", h.name), &h.bias));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            out.push(&mut l.gamma);
            out.push(&mut l.beta);
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [ConvBn] {
        &mut self.layers
    }

    pub(crate) fn set_pruned(&mut self, mask: PruneMask) {
        self.pruned = mask;
    }

    pub(crate) fn set_trained_epochs(&mut self, epochs: usize) {
        self.trained_epochs = epochs;
    }

    /// Register every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.parameters().into_iter().map(|(_, t)| g.param(t)).collect()
    }

    /// Forward pass; in train mode the batch statistics update the running estimates.
    pub fn forward(&mut self, g: &mut Graph, input: Var, mode: Mode) -> Result<ForwardOutput> {
        let params = self.bind(g);
        let mut stats = std::mem::take(&mut self.running);
        let out = self.forward_with(g, &params, input, mode, &mut stats);
        self.running = stats;
        out
    }

    /// Forward pass that leaves the model untouched, normalizing with running statistics.
    pub fn forward_eval(&self, g: &mut Graph, input: Var) -> Result<ForwardOutput> {
        let params = self.bind(g);
        let mut stats = self.running.clone();
        self.forward_with(g, &params, input, Mode::Test, &mut stats)
    }

    /// Forward pass over externally bound parameter leaves (see [`Model::bind`]).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: Var,
        mode: Mode,
        stats: &mut [RunningStats],
    ) -> Result<ForwardOutput> {
        let expected = 4 * self.layers.len() + 2 * self.heads.len();
        if params.len() != expected || stats.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "forward_with got {} parameters and {} stat sets, model has {expected} and {}",
                params.len(),
                stats.len(),
                self.layers.len()
            )));
        }
        let in_shape = g.value(input).shape().to_vec();
        if in_shape.len() != 5 || in_shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects [N,{},T,H,W], got {in_shape:?}",
                self.config.in_channels
            )));
        }
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Test => BatchNormMode::Eval,
        };
        let mut conv_out = None;
        let mut apply = |g: &mut Graph, idx: usize, x: Var, conv_out: &mut Option<Var>| -> Result<Var> {
            let l = &self.layers[idx];
            let p = &params[4 * idx..4 * idx + 4];
            let c = g.conv3d(x, p[0], p[1], l.stride, l.padding)?;
            *conv_out = Some(c);
            g.batch_norm(c, p[2], p[3], &mut stats[idx], bn_mode)
        };

        let stem = apply(g, 0, input, &mut conv_out)?;
        let mut h = g.relu(stem);
        let head_base = 4 * self.layers.len();
        let mut logits = Vec::with_capacity(NUM_STACKS);
        let mut stack_outputs = Vec::with_capacity(NUM_STACKS);
        let mut stack1_last_conv = None;
        for s in 0..NUM_STACKS {
            for block in self.blocks.iter().filter(|b| b.stack == s) {
                let mut y = h;
                for (i, &idx) in block.convs.iter().enumerate() {
                    y = apply(g, idx, y, &mut conv_out)?;
                    if s == 0 && i + 1 == block.convs.len() {
                        stack1_last_conv = conv_out;
                    }
                    if i + 1 < block.convs.len() {
                        y = g.relu(y);
                    }
                }
                let skip = match block.shortcut {
                    Some(idx) => apply(g, idx, h, &mut conv_out)?,
                    None => h,
                };
                let sum = g.add(y, skip)?;
                h = g.relu(sum);
            }
            stack_outputs.push(h);
            let pooled = g.global_avg_pool(h)?;
            let p = &params[head_base + 2 * s..head_base + 2 * s + 2];
            logits.push(g.linear(pooled, p[0], p[1])?);
        }
        Ok(ForwardOutput {
            params: params.to_vec(),
            logits: logits.try_into().expect("four heads"),
            stack_outputs: stack_outputs.try_into().expect("four stacks"),
            stack1_last_conv: stack1_last_conv.expect("stack 1 has a block"),
        })
    }

    /// Parameter gradients after `g.backward`, in [`Model::parameters`] order.
    ///
    /// Entries belonging to pruned filters are forced to zero.
    pub fn parameter_grads(&self, g: &Graph, out: &ForwardOutput) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = out
            .params
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect();
        self.mask_gradients(&mut grads);
        grads
    }

    pub fn mask_gradients(&self, grads: &mut [Vec<f64>]) {
        for (li, dead) in self.pruned.layers().iter().enumerate() {
            let idx = li + 1;
            let per_filter = self.layers[idx].weight.numel() / dead.len();
            for (c, _) in dead.iter().enumerate().filter(|(_, d)| **d) {
                grads[4 * idx][c * per_filter..(c + 1) * per_filter].fill(0.0);
                for k in 1..4 {
                    grads[4 * idx + k][c] = 0.0;
                }
            }
        }
    }
}

/// Normalized mean absolute adjoint at the last convolution of stack 1.
///
/// The loss is head `head`'s cross-entropy against `targets` (already mapped
/// to that head's label space); batch normalization uses running statistics.
/// The result has shape `[C,T,H,W]` with values in `[0,1]`.
pub fn gradient_attribution(model: &Model, batch: &Tensor, targets: &[usize], head: usize) -> Result<Tensor> {
    if head >= NUM_STACKS {
        return Err(Error::Usage(format!("head index {head} outside 0..{NUM_STACKS}")));
    }
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let out = model.forward_eval(&mut g, x)?;
    let loss = g.softmax_cross_entropy(out.logits[head], targets)?;
    g.backward(loss)?;
    let tap = g.value(out.stack1_last_conv);
    let shape = tap.shape().to_vec();
    let cell: usize = shape[1..].iter().product();
    let mut map = vec![0.0; cell];
    if let Some(adj) = g.grad(out.stack1_last_conv) {
        for sample in adj.chunks(cell) {
            for (m, a) in map.iter_mut().zip(sample) {
                *m += a.abs();
            }
        }
        for m in &mut map {
            *m /= shape[0] as f64;
        }
    }
    let max = map.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for m in &mut map {
            *m /= max;
        }
    }
    Tensor::new(shape[1..].to_vec(), map)
}
