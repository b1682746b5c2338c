#![allow(dead_code)]

use hact_core::model::{build_model, StackConfig};
use hact_core::tensor::{check_gradients, BatchNormMode, GradCheckReport, Graph, RunningStats, Tensor, Var};
use hact_core::{Mode, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| n.sample(&mut rng))
}

/// Fixed random projection to a scalar so every output element matters.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(randn(&shape, seed));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

pub fn conv3d_cases() -> Vec<GradCheckReport> {
    [([1, 1, 1], [0, 0, 0]), ([1, 2, 2], [1, 1, 1]), ([2, 1, 2], [0, 1, 0])]
        .into_iter()
        .map(|(stride, padding)| {
            check_gradients(
                |g, v| {
                    let y = g.conv3d(v[0], v[1], v[2], stride, padding)?;
                    project(g, y, 9)
                },
                &[("x", randn(&[2, 2, 3, 5, 4], 1)), ("w", randn(&[3, 2, 2, 3, 3], 2)), ("b", randn(&[3], 3))],
                STEP,
                TOL,
            )
            .unwrap()
        })
        .collect()
}

pub fn pooling_linear_cross_entropy() -> GradCheckReport {
    check_gradients(
        |g, v| {
            let p = g.global_avg_pool(v[0])?;
            let z = g.linear(p, v[1], v[2])?;
            g.softmax_cross_entropy(z, &[2, 0, 1])
        },
        &[("x", randn(&[3, 4, 2, 3, 3], 4)), ("w", randn(&[5, 4], 5)), ("b", randn(&[5], 6))],
        STEP,
        TOL,
    )
    .unwrap()
}

pub fn elementwise() -> GradCheckReport {
    // Shift away from zero so relu's kink is never straddled by the difference step.
    let mut x = randn(&[4, 6], 7);
    for v in x.data_mut() {
        *v += if *v >= 0.0 { 0.1 } else { -0.1 };
    }
    check_gradients(
        |g, v| {
            let a = g.relu(v[0]);
            let b = g.mul(a, v[1])?;
            let c = g.add(b, v[0])?;
            let d = g.scale(c, -1.7);
            project(g, d, 11)
        },
        &[("x", x), ("y", randn(&[4, 6], 8))],
        STEP,
        TOL,
    )
    .unwrap()
}

pub fn batch_norm(mode: BatchNormMode) -> GradCheckReport {
    check_gradients(
        |g, v| {
            let mut stats = RunningStats {
                mean: vec![0.3, -0.2, 0.1],
                var: vec![1.5, 0.7, 2.0],
                ..RunningStats::new(3)
            };
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode)?;
            project(g, y, 12)
        },
        &[("x", randn(&[4, 3, 2, 2, 2], 13)), ("gamma", randn(&[3], 14)), ("beta", randn(&[3], 15))],
        STEP,
        TOL,
    )
    .unwrap()
}

pub fn corrupted_adjoint() -> GradCheckReport {
    check_gradients(
        |g, v| {
            let y = g.adjoint_scale(v[0], 1.5);
            project(g, y, 3)
        },
        &[("x", randn(&[5], 1))],
        STEP,
        TOL,
    )
    .unwrap()
}

/// Stem, two residual blocks (one with a projection shortcut), pooling and a classifier.
pub fn two_block_residual_network() -> GradCheckReport {
    let inputs = [
        ("x", randn(&[2, 1, 3, 6, 6], 20)),
        ("stem.w", randn(&[3, 1, 1, 3, 3], 21)),
        ("stem.b", randn(&[3], 22)),
        ("b1.w1", randn(&[3, 3, 3, 3, 3], 23)),
        ("b1.b1", randn(&[3], 24)),
        ("b1.g1", randn(&[3], 25)),
        ("b1.e1", randn(&[3], 26)),
        ("b2.w1", randn(&[4, 3, 3, 3, 3], 27)),
        ("b2.b1", randn(&[4], 28)),
        ("b2.g1", randn(&[4], 29)),
        ("b2.e1", randn(&[4], 30)),
        ("b2.ws", randn(&[4, 3, 1, 1, 1], 31)),
        ("b2.bs", randn(&[4], 32)),
        ("fc.w", randn(&[3, 4], 33)),
        ("fc.b", randn(&[3], 34)),
    ];
    check_gradients(
        |g, v| {
            let s = g.conv3d(v[0], v[1], v[2], [1, 2, 2], [0, 1, 1])?;
            let h = g.relu(s);
            let mut st = RunningStats::new(3);
            let c = g.conv3d(h, v[3], v[4], [1, 1, 1], [1, 1, 1])?;
            let n = g.batch_norm(c, v[5], v[6], &mut st, BatchNormMode::Train)?;
            let sum = g.add(n, h)?;
            let h = g.relu(sum);
            let mut st = RunningStats::new(4);
            let c = g.conv3d(h, v[7], v[8], [1, 1, 1], [1, 1, 1])?;
            let n = g.batch_norm(c, v[9], v[10], &mut st, BatchNormMode::Train)?;
            let skip = g.conv3d(h, v[11], v[12], [1, 1, 1], [0, 0, 0])?;
            let sum = g.add(n, skip)?;
            let h = g.relu(sum);
            let p = g.global_avg_pool(h)?;
            let z = g.linear(p, v[13], v[14])?;
            g.softmax_cross_entropy(z, &[1, 2])
        },
        &inputs,
        STEP,
        TOL,
    )
    .unwrap()
}

/// Tiny full model, loss over all four heads.
pub fn full_model(mode: Mode, input: &[usize]) -> GradCheckReport {
    let cfg = StackConfig {
        base_channels: 2,
        num_classes_per_head: [2, 2, 3, 4],
        ..StackConfig::default()
    };
    let mut model = build_model(&cfg, 5).unwrap();
    for (i, s) in model.running_stats_mut().iter_mut().enumerate() {
        for (c, (m, v)) in s.mean.iter_mut().zip(&mut s.var).enumerate() {
            *m = 0.1 * ((i + c) % 3) as f64 - 0.13;
            *v = 0.5 + 0.25 * ((i * c) % 4) as f64;
        }
    }
    let names: Vec<String> = model.parameters().iter().map(|(n, _)| n.clone()).collect();
    let mut inputs: Vec<(&str, Tensor)> = model.parameters().iter().zip(&names).map(|((_, t), n)| (n.as_str(), (*t).clone())).collect();
    inputs.push(("x", randn(input, 40)));
    let np = names.len();
    check_gradients(
        |g, v| {
            let mut stats = model.running_stats().to_vec();
            let out = model.forward_with(g, &v[..np], v[np], mode, &mut stats)?;
            let mut total = g.softmax_cross_entropy(out.logits[0], &[0, 1])?;
            for (h, t) in [(1, [1, 0]), (2, [2, 1]), (3, [3, 0])] {
                let l = g.softmax_cross_entropy(out.logits[h], &t)?;
                let l = g.scale(l, 0.5 + h as f64);
                total = g.add(total, l)?;
            }
            Ok(total)
        },
        &inputs,
        STEP,
        TOL,
    )
    .unwrap()
}
