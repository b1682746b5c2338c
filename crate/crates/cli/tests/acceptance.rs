//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p hact-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::grad_cases;
use common::removed::masked_removed_gap;
use hact_core::experiment::{derive_hierarchy, hierarchy_confusion, load_dataset, prepare, run_first_pass, run_pruning, run_second_pass};
use hact_core::hierarchy::{edge_costs, greedy_partition, ConfusionMatrix};
use hact_core::io::ExperimentConfig;
use hact_core::model::StackConfig;
use hact_core::preprocess::{fit_projection, Correspondence, ProjectionParams};
use hact_core::pruning::{replay_stop_rule, select, FilterNormTable, LayerNorms, PruneMask, PruneVariant};
use hact_core::tensor::BatchNormMode;
use hact_core::train::Objective;
use hact_core::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let r = f();
        self.record(name, r, start.elapsed());
    }

    fn record(&mut self, name: &str, r: Outcome, elapsed: Duration) {
        let status = if r.passed { "PASS" } else { "FAIL" };
        if !r.passed {
            self.failures += 1;
        }
        println!("{status} {name}: {} [{:.1} s]", r.detail, elapsed.as_secs_f64());
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn synthetic_config() -> ExperimentConfig {
    let path = workspace_root().join("configs/synthetic.conf");
    let text = std::fs::read_to_string(&path).expect("configs/synthetic.conf");
    ExperimentConfig::parse(&text, &path.display().to_string()).expect("valid config")
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut reports = grad_cases::conv3d_cases();
    reports.push(grad_cases::pooling_linear_cross_entropy());
    reports.push(grad_cases::elementwise());
    reports.push(grad_cases::batch_norm(BatchNormMode::Train));
    reports.push(grad_cases::batch_norm(BatchNormMode::Eval));
    reports.push(grad_cases::two_block_residual_network());
    reports.push(grad_cases::full_model(Mode::Test, &[2, 1, 4, 8, 8]));
    reports.push(grad_cases::full_model(Mode::Train, &[2, 1, 8, 8, 8]));
    let corrupted = grad_cases::corrupted_adjoint();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.worst()).fold(0.0f64, f64::max);
    let all = reports.iter().all(|r| r.passed());
    Outcome {
        passed: all && !corrupted.passed() && elapsed < Duration::from_secs(60),
        detail: format!(
            "{} checks, worst relative error {worst:.2e} (tol 1e-4), corrupted adjoint flagged: {}, {:.1} s (limit 60 s)",
            reports.len(),
            !corrupted.passed(),
            elapsed.as_secs_f64()
        ),
    }
}

/// Cut weight of every balanced assignment, by exhaustive enumeration.
fn all_balanced_costs(e: &[Vec<f64>], k: usize) -> Vec<f64> {
    fn go(i: usize, size: usize, k: usize, groups: &mut Vec<usize>, counts: &mut Vec<usize>, e: &[Vec<f64>], out: &mut Vec<f64>) {
        let n = e.len();
        if i == n {
            let mut cut = 0.0;
            for a in 0..n {
                for b in a + 1..n {
                    if groups[a] != groups[b] {
                        cut += e[a][b];
                    }
                }
            }
            out.push(cut);
            return;
        }
        // Only open the next unused group, so each partition is generated once.
        for g in 0..k.min(counts.len() + 1) {
            if g == counts.len() {
                counts.push(0);
            }
            if counts[g] < size {
                counts[g] += 1;
                groups.push(g);
                go(i + 1, size, k, groups, counts, e, out);
                groups.pop();
                counts[g] -= 1;
            }
            if counts[g] == 0 {
                counts.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(0, e.len() / k, k, &mut Vec::new(), &mut Vec::new(), e, &mut out);
    out
}

fn partition_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut cases, mut optimal, mut beaten) = (0, 0, 0);
    for (n, k) in [(4, 2), (6, 2), (6, 3), (8, 2), (8, 4)] {
        for m in 0..20 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| if i == j { rng.random_range(20..60) as f64 } else { rng.random_range(0..12) as f64 }).collect())
                .collect();
            let e: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { rows[i][j] + rows[j][i] }).collect()).collect();
            let min = all_balanced_costs(&e, k).into_iter().fold(f64::INFINITY, f64::min);
            let costs = edge_costs(&ConfusionMatrix::from_rows(&rows).unwrap());
            let found = greedy_partition(&costs, k, 1000, m as u64).unwrap();
            cases += 1;
            if (found.cost - min).abs() <= 1e-9 {
                optimal += 1;
            } else if found.cost < min {
                beaten += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let rate = optimal as f64 / cases as f64;
    Outcome {
        passed: rate >= 0.95 && beaten == 0 && elapsed < Duration::from_secs(120),
        detail: format!(
            "{optimal}/{cases} at the exhaustive minimum ({:.1}%, need 95%), {beaten} below it, {:.1} s (limit 120 s)",
            100.0 * rate,
            elapsed.as_secs_f64()
        ),
    }
}

fn projection() -> Outcome {
    let truth = ProjectionParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<Correspondence> = (0..500)
        .map(|_| {
            let world = [rng.random_range(-1.5..1.5), rng.random_range(-1.2..1.2), rng.random_range(1.0..5.0)];
            let pixel = [
                558.1 * world[0] / world[2] + truth.b_x,
                579.5 * world[1] / world[2] + truth.b_y,
            ];
            Correspondence { world, pixel }
        })
        .collect();
    let fit = fit_projection(&samples, truth.b_x, truth.b_y).unwrap();
    let fit_err = ((fit.c_x - 558.1) / 558.1).abs().max(((fit.c_y - 579.5) / 579.5).abs());

    let (mut ray, mut inversion) = (0.0f64, 0.0f64);
    for s in &samples {
        let p = truth.project_point(&s.world);
        for lambda in [0.25, 1.7, 40.0] {
            let q = truth.project_point(&s.world.map(|v| lambda * v));
            ray = ray.max((p[0] - q[0]).abs().max((p[1] - q[1]).abs()));
        }
        let back = truth.unproject(p[0], p[1], s.world[2]);
        inversion = inversion.max((0..3).map(|i| (back[i] - s.world[i]).abs()).fold(0.0, f64::max));
        let again = truth.project_point(&back);
        inversion = inversion.max((again[0] - p[0]).abs().max((again[1] - p[1]).abs()));
    }
    Outcome {
        passed: fit_err <= 1e-6 && ray <= 1e-9 && inversion <= 1e-9,
        detail: format!(
            "fitted c = ({:.6}, {:.6}), relative error {fit_err:.1e} (tol 1e-6); ray invariance {ray:.1e}, inversion {inversion:.1e} (tol 1e-9)",
            fit.c_x, fit.c_y
        ),
    }
}

fn pruning_protocol() -> Outcome {
    let (best, halted) = replay_stop_rule(95.45, &[95.52, 95.61, 95.60, 95.66, 95.41, 95.47]);

    let basic = StackConfig {
        bottleneck: false,
        blocks_per_stack: [2, 1, 1, 1],
        ..StackConfig::default()
    };
    let gap = masked_removed_gap(&StackConfig::default(), 1, PruneVariant::Global, 0.3, 2)
        .max(masked_removed_gap(&StackConfig::default(), 2, PruneVariant::PerLayer, 0.25, 1))
        .max(masked_removed_gap(&basic, 4, PruneVariant::Global, 0.2, 3));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut count_errors = 0;
    let mut checked = 0;
    for _ in 0..200 {
        let sizes: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(1..40)).collect();
        let p = rng.random_range(0.01..0.9);
        let global = rng.random_bool(0.5);
        let table = FilterNormTable {
            layers: sizes
                .iter()
                .enumerate()
                .map(|(l, &n)| LayerNorms {
                    name: format!("l{l}"),
                    norms: (0..n).map(|_| rng.random_range(0.0..3.0)).collect(),
                })
                .collect(),
        };
        let variant = if global { PruneVariant::Global } else { PruneVariant::PerLayer };
        let mut mask = PruneMask::empty(&sizes);
        for _ in 0..4 {
            let dead: Vec<usize> = mask.layers().iter().map(|l| l.iter().filter(|&&d| d).count()).collect();
            let delta = select(variant, &table, p, &mask).unwrap();
            let added: Vec<usize> = delta.layers().iter().map(|l| l.iter().filter(|&&d| d).count()).collect();
            let expected: Vec<usize> = if global {
                let alive: usize = sizes.iter().zip(&dead).map(|(n, d)| n - d).sum();
                vec![(p * alive as f64).floor() as usize]
            } else {
                sizes.iter().zip(&dead).map(|(n, d)| (p * (n - d) as f64).floor() as usize).collect()
            };
            let got: Vec<usize> = if global { vec![added.iter().sum()] } else { added };
            checked += 1;
            if got != expected {
                count_errors += 1;
            }
            mask = mask.union(&delta).unwrap();
        }
    }
    Outcome {
        passed: (best, halted) == (4, 6) && gap <= 1e-9 && count_errors == 0,
        detail: format!(
            "stop rule best pass {best}, halted after {halted} (want 4, 6); masked vs removed max gap {gap:.1e} (tol 1e-9); \
             prune counts {}/{checked} exact",
            checked - count_errors
        ),
    }
}

struct EndToEnd {
    first_val: f64,
    first_test: f64,
    outcomes: Vec<(String, Outcome, Duration)>,
}

fn end_to_end(cfg: &ExperimentConfig) -> EndToEnd {
    let raw = load_dataset(cfg).unwrap();
    let data = prepare(&raw, cfg).unwrap();
    let mut outcomes = Vec::new();

    let start = Instant::now();
    let first = run_first_pass(&data, cfg).unwrap();
    let elapsed = start.elapsed();
    let epochs = first.metrics.epochs.len();
    let a = first.metrics.final_accuracy;
    outcomes.push((
        "(a) first-pass validation accuracy".to_string(),
        Outcome {
            passed: a >= 0.90 && epochs <= 20 && elapsed < Duration::from_secs(600),
            detail: format!(
                "{:.1}% on {} validation clips (need 90%), {epochs} epochs (max 20), {:.0} s (limit 600 s); test {:.1}%",
                100.0 * a,
                data.val.len(),
                elapsed.as_secs_f64(),
                100.0 * first.test.accuracy
            ),
        },
        elapsed,
    ));

    let start = Instant::now();
    let hierarchy = derive_hierarchy(hierarchy_confusion(&first.metrics, cfg.hierarchy.confusion), cfg).unwrap();
    let family = |c: usize| cfg.synth.superfamily_of(c);
    let k4 = hierarchy.coarse_levels().iter().find(|l| l.num_superclasses == cfg.synth.superfamilies);
    let recovered = k4.map_or(0, |l| {
        let groups = l.groups();
        (0..cfg.synth.superfamilies)
            .filter(|&f| {
                let planted: Vec<usize> = (0..cfg.synth.num_classes).filter(|&c| family(c) == f).collect();
                groups.contains(&planted)
            })
            .count()
    });
    outcomes.push((
        "(b) hierarchy recovers planted superfamilies".to_string(),
        Outcome {
            passed: recovered >= 3,
            detail: format!(
                "{recovered}/4 planted superfamilies grouped exactly at K=4 (need 3); groups {:?}",
                k4.map(|l| l.groups()).unwrap_or_default()
            ),
        },
        start.elapsed(),
    ));

    let start = Instant::now();
    let second = run_second_pass(&data, &hierarchy, Some(&first.model), cfg).unwrap();
    let c = second.metrics.final_accuracy;
    outcomes.push((
        "(c) hierarchical second pass".to_string(),
        Outcome {
            passed: c >= a - 0.02 - 1e-12,
            detail: format!(
                "{:.1}% vs first pass {:.1}% (need at least {:.1}%), weights {:?}; test {:.1}%",
                100.0 * c,
                100.0 * a,
                100.0 * (a - 0.02),
                cfg.train.loss_weights,
                100.0 * second.test.accuracy
            ),
        },
        start.elapsed(),
    ));

    let start = Instant::now();
    let mut prune_cfg = cfg.clone();
    prune_cfg.prune.p = 0.1;
    prune_cfg.prune.max_passes = 1;
    let objective = Objective::Hierarchical(hierarchy.clone());
    let pruned = run_pruning(second.model, &data, &objective, &prune_cfg).unwrap();
    let before = pruned.initial_accuracy;
    let after = pruned.outcome.records.first().map_or(f64::NAN, |r| r.val_accuracy);
    outcomes.push((
        "(d) one 10% prune pass with retraining".to_string(),
        Outcome {
            passed: after >= before - 0.02 - 1e-12,
            detail: format!(
                "{:.1}% after pruning {} filters vs {:.1}% before (need at least {:.1}%)",
                100.0 * after,
                pruned.outcome.records.first().map_or(0, |r| r.pruned_total),
                100.0 * before,
                100.0 * (before - 0.02)
            ),
        },
        start.elapsed(),
    ));

    EndToEnd {
        first_val: a,
        first_test: first.test.accuracy,
        outcomes,
    }
}

fn cropping_ablation(cfg: &ExperimentConfig, cropped_val: f64, cropped_test: f64) -> Outcome {
    let mut plain = cfg.clone();
    plain.preprocess.crop = false;
    let raw = load_dataset(&plain).unwrap();
    let data = prepare(&raw, &plain).unwrap();
    let run = run_first_pass(&data, &plain).unwrap();
    let (val, test) = (run.metrics.final_accuracy, run.test.accuracy);
    Outcome {
        passed: cfg.synth.clutter >= 0.5 && cfg.synth.offset_range > 0.0 && cropped_test >= test,
        detail: format!(
            "clutter {}, offset range {}: test accuracy decides; cropped test {:.1}% / val {:.1}%, uncropped test {:.1}% / val {:.1}%",
            cfg.synth.clutter,
            cfg.synth.offset_range,
            100.0 * cropped_test,
            100.0 * cropped_val,
            100.0 * test,
            100.0 * val
        ),
    }
}

fn hact(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hact")).args(args).output().expect("run hact");
    assert!(out.status.success(), "hact {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let conf = workspace_root().join("configs/synthetic.conf");
    let conf = conf.to_str().unwrap();
    let small = [
        "--set", "synth.clips_per_class=6",
        "--set", "train.epochs=2",
        "--set", "prune.retrain_epochs=1",
        "--set", "prune.max_passes=2",
    ];
    let mut compared = Vec::new();
    let mut differing = Vec::new();
    let mut runs = Vec::new();
    for r in 0..2 {
        let out = dir.path().join(format!("run{r}"));
        let out_s = out.to_str().unwrap();
        let mut args = vec!["train", "--config", conf, "--seed", "7", "--out", out_s];
        args.extend(small);
        hact(&args);
        let ck = out.join("model.ckpt");
        let pruned = out.join("prune");
        hact(&["prune", "--checkpoint", ck.to_str().unwrap(), "--out", pruned.to_str().unwrap()]);
        let eval = hact(&["evaluate", "--checkpoint", ck.to_str().unwrap()]).stdout;
        runs.push((out, eval));
    }
    for name in ["metrics.csv", "confusion.csv", "crops.csv", "prune/metrics.csv", "prune/prune.csv"] {
        let a = std::fs::read(runs[0].0.join(name)).unwrap();
        let b = std::fs::read(runs[1].0.join(name)).unwrap();
        compared.push(name.to_string());
        if a != b {
            differing.push(name.to_string());
        }
    }
    compared.push("evaluate stdout".into());
    if runs[0].1 != runs[1].1 {
        differing.push("evaluate stdout".into());
    }
    Outcome {
        passed: differing.is_empty(),
        detail: format!("seed 7 twice: {} outputs compared, differing {:?}", compared.len(), differing),
    }
}

fn main() {
    let mut suite = Suite { failures: 0 };
    suite.run("gradient suite", gradient_suite);
    suite.run("partition oracle", partition_oracle);
    suite.run("projection", projection);
    suite.run("pruning protocol", pruning_protocol);

    let cfg = synthetic_config();
    let e2e = end_to_end(&cfg);
    let (val, test) = (e2e.first_val, e2e.first_test);
    for (name, outcome, elapsed) in e2e.outcomes {
        suite.record(&format!("end-to-end {name}"), outcome, elapsed);
    }
    suite.run("cropping ablation", || cropping_ablation(&cfg, val, test));
    suite.run("determinism", determinism);

    println!("{} criteria failed", suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
