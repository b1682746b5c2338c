//! `hact`: command-line front end for the experiment pipelines.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hact_core::experiment::{
    clip_crop, derive_hierarchy, hierarchy_confusion, load_dataset, prepare, prepare_clip, report,
    run_first_pass, run_pruning, run_two_pass, write_dataset,
};
use hact_core::hierarchy::{build_hierarchy, edge_costs, greedy_partition};
use hact_core::io::formats::{
    hierarchy_to_text, read_confusion_csv, read_skeletons, write_attribution_csv, write_confusion_csv, write_crops_csv,
    write_hfrm_f64, write_metrics_csv, write_prune_csv, write_text,
};
use hact_core::io::{load_checkpoint, save_checkpoint, Checkpoint, ExperimentConfig};
use hact_core::model::{gradient_attribution, NUM_STACKS};
use hact_core::preprocess::{fit_projection, projection_residual, Correspondence};
use hact_core::synthetic::generate_synthetic;
use hact_core::train::{eval_sample, evaluate, stack_samples, Objective};
use hact_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hact", version, about = "Skeleton-guided cropping, hierarchical heads and filter pruning for video action classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (`section.key = value` lines); defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override `train.seed` (`synth.seed` for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute crop rectangles and optionally write cropped frames.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Crop rectangles CSV.
        #[arg(long)]
        out: PathBuf,
        /// Directory for cropped, rescaled frames (`<id>.hfrm`, f64).
        #[arg(long)]
        frames_out: Option<PathBuf>,
    },
    /// Least-squares fit of the projection coefficients from paired 3D and 2D joints.
    FitProjection {
        #[command(flatten)]
        common: Common,
        /// Dataset directory with `skeletons.txt` and `skeletons_2d.txt`; synthetic data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Balanced partition of classes from a confusion matrix CSV.
    Partition {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        confusion: PathBuf,
        /// Superclass counts, comma separated; `hierarchy.levels` when omitted.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<usize>,
        /// Write the hierarchy in text form.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// First pass, hierarchy derivation and hierarchical second pass.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Stop after the first pass and its confusion matrix.
        #[arg(long)]
        first_pass_only: bool,
    },
    /// Iterative filter pruning with retraining.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint under averaged sampling.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Gradient attribution map at the end of stack 1 for one head.
    Attribution {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Head number, 1 (coarsest) to 4 (original classes).
        #[arg(long)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
        /// Validation clips in the batch.
        #[arg(long, default_value_t = 8)]
        clips: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Val,
    Test,
}

fn load_config(common: &Common, seed_key: &str) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = hact_core::io::formats::read_text(path)?;
            ExperimentConfig::parse(&text, &path.display().to_string())?
        }
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|m| Error::Config(format!("--set {kv}: {m}")))?;
    }
    if let Some(seed) = common.seed {
        cfg.set(seed_key, &seed.to_string()).map_err(Error::Config)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common, "synth.seed")?;
    let data = generate_synthetic(&cfg.synth)?;
    write_dataset(out, &data)?;
    println!("wrote {} clips to {}", data.clips.len(), out.display());
    Ok(())
}

fn preprocess(common: &Common, out: &Path, frames_out: Option<&Path>) -> Result<()> {
    let cfg = load_config(common, "train.seed")?;
    let raw = load_dataset(&cfg)?;
    if let Some(dir) = frames_out {
        create_dir(dir)?;
    }
    let mut rows = Vec::with_capacity(raw.len());
    for clip in &raw {
        if let Some(dir) = frames_out {
            let (prepared, rect) = prepare_clip(clip, &cfg)?;
            write_hfrm_f64(&dir.join(format!("{}.hfrm", clip.id)), &prepared.frames)?;
            rows.push((clip.id, rect));
        } else {
            rows.push((clip.id, clip_crop(clip, &cfg)?));
        }
    }
    write_crops_csv(out, &rows)?;
    println!("wrote {} crop rectangles to {}", rows.len(), out.display());
    Ok(())
}

fn fit_projection_cmd(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(common, "train.seed")?;
    let dir = data.map(Path::to_path_buf).or_else(|| cfg.data_dir.clone());
    let (pairs, width, height) = match dir {
        Some(dir) => {
            let sk3 = read_skeletons(&dir.join("skeletons.txt"))?;
            let sk2 = read_skeletons(&dir.join("skeletons_2d.txt"))?;
            let raw = load_dataset(&ExperimentConfig {
                data_dir: Some(dir.clone()),
                ..cfg.clone()
            })?;
            let first = raw.first().ok_or_else(|| Error::Data(format!("{} holds no clips", dir.display())))?;
            let mut pairs = Vec::new();
            for (id, people) in &sk3 {
                let flat = sk2
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("clip {id} has no 2D skeleton")))?;
                if flat.len() != people.len() {
                    return Err(Error::Data(format!("clip {id}: person counts differ between 3D and 2D files")));
                }
                for (p3, p2) in people.iter().zip(flat) {
                    pairs.extend(correspondences(*id, p3, p2)?);
                }
            }
            (pairs, first.width(), first.height())
        }
        None => {
            let data = generate_synthetic(&cfg.synth)?;
            let mut pairs = Vec::new();
            for c in &data.clips {
                pairs.extend(correspondences(c.id, &c.skeleton_3d, &c.skeleton_2d)?);
            }
            (pairs, cfg.synth.width, cfg.synth.height)
        }
    };
    let bias = cfg.projection.resolve(width, height);
    let params = fit_projection(&pairs, bias.b_x, bias.b_y)?;
    println!("c_x {:?}", params.c_x);
    println!("c_y {:?}", params.c_y);
    println!("b_x {:?}", params.b_x);
    println!("b_y {:?}", params.b_y);
    println!("rms_residual {:?}", projection_residual(&pairs, &params));
    println!("samples {}", pairs.len());
    Ok(())
}

fn correspondences(
    id: u64,
    s3: &hact_core::preprocess::SkeletonSequence,
    s2: &hact_core::preprocess::SkeletonSequence,
) -> Result<Vec<Correspondence>> {
    if s3.dims() != 3 || s2.dims() != 2 || s3.num_frames() != s2.num_frames() || s3.num_joints() != s2.num_joints() {
        return Err(Error::Data(format!("clip {id}: 3D and 2D skeletons do not pair up")));
    }
    let mut out = Vec::with_capacity(s3.num_frames() * s3.num_joints());
    for t in 0..s3.num_frames() {
        for j in 0..s3.num_joints() {
            let (w, p) = (s3.joint(t, j), s2.joint(t, j));
            out.push(Correspondence {
                world: [w[0], w[1], w[2]],
                pixel: [p[0], p[1]],
            });
        }
    }
    Ok(out)
}

fn partition(common: &Common, confusion: &Path, levels: &[usize], out: Option<&Path>) -> Result<()> {
    let cfg = load_config(common, "train.seed")?;
    let c = read_confusion_csv(confusion)?;
    let e = edge_costs(&c);
    let levels = if levels.is_empty() { cfg.hierarchy.levels.clone() } else { levels.to_vec() };
    for (l, &k) in levels.iter().enumerate() {
        let p = greedy_partition(&e, k, cfg.hierarchy.restarts, cfg.train.seed.wrapping_add(l as u64))?;
        let mut groups = vec![Vec::new(); k];
        for (class, &s) in p.assignment.iter().enumerate() {
            groups[s].push(class.to_string());
        }
        let groups: Vec<String> = groups.iter().map(|g| format!("{{{}}}", g.join(","))).collect();
        println!("level {l} K {k} cost {:?} assignment {}", p.cost, groups.join(" "));
    }
    if let Some(path) = out {
        let h = build_hierarchy(&e, &levels, cfg.hierarchy.restarts, cfg.train.seed)?;
        write_text(path, &hierarchy_to_text(&h))?;
    }
    Ok(())
}

fn train_cmd(common: &Common, out: &Path, first_only: bool) -> Result<()> {
    let cfg = load_config(common, "train.seed")?;
    create_dir(out)?;
    let raw = load_dataset(&cfg)?;
    let data = prepare(&raw, &cfg)?;
    write_crops_csv(&out.join("crops.csv"), &data.crops)?;
    if first_only {
        let first = run_first_pass(&data, &cfg)?;
        let c = hierarchy_confusion(&first.metrics, cfg.hierarchy.confusion);
        write_metrics_csv(&out.join("metrics.csv"), &[("first_pass", &first.metrics.epochs)])?;
        write_confusion_csv(&out.join("confusion.csv"), c)?;
        let hierarchy = derive_hierarchy(c, &cfg)?;
        write_text(&out.join("hierarchy.txt"), &hierarchy_to_text(&hierarchy))?;
        save_checkpoint(
            &Checkpoint {
                config: cfg.clone(),
                model: first.model,
                hierarchy: None,
                rng: first.metrics.rng,
                stage: "first_pass".into(),
            },
            &out.join("model.ckpt"),
        )?;
        println!("first_pass val_accuracy {:.4} test_accuracy {:.4}", first.metrics.final_accuracy, first.test.accuracy);
        return Ok(());
    }
    let run = run_two_pass(&data, &cfg)?;
    let c = hierarchy_confusion(&run.first.metrics, cfg.hierarchy.confusion);
    write_metrics_csv(
        &out.join("metrics.csv"),
        &[("first_pass", &run.first.metrics.epochs), ("second_pass", &run.second.metrics.epochs)],
    )?;
    write_confusion_csv(&out.join("confusion.csv"), c)?;
    write_text(&out.join("hierarchy.txt"), &hierarchy_to_text(&run.hierarchy))?;
    let text = report(&run, c)?;
    write_text(&out.join("report.txt"), &text)?;
    save_checkpoint(
        &Checkpoint {
            config: cfg.clone(),
            model: run.second.model.clone(),
            hierarchy: Some(run.hierarchy.clone()),
            rng: run.second.metrics.rng,
            stage: "second_pass".into(),
        },
        &out.join("model.ckpt"),
    )?;
    print!("{text}");
    Ok(())
}

fn objective_for(ck: &Checkpoint) -> Objective {
    match &ck.hierarchy {
        Some(h) => Objective::Hierarchical(h.clone()),
        None => Objective::FinalHead,
    }
}

fn prune_cmd(common: &Common, checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = if common.config.is_some() || common.seed.is_some() || !common.overrides.is_empty() {
        let cfg = load_config(common, "train.seed")?;
        if cfg.model != ck.config.model {
            return Err(Error::Config("model section differs from the checkpoint's".into()));
        }
        cfg
    } else {
        ck.config.clone()
    };
    create_dir(out)?;
    let raw = load_dataset(&cfg)?;
    let data = prepare(&raw, &cfg)?;
    let objective = objective_for(&ck);
    let run = run_pruning(ck.model.clone(), &data, &objective, &cfg)?;
    write_prune_csv(&out.join("prune.csv"), &run.outcome.records)?;
    let names: Vec<String> = (1..=run.retrain.len()).map(|p| format!("prune{p}")).collect();
    let stages: Vec<(&str, &[_])> = names.iter().zip(&run.retrain).map(|(n, m)| (n.as_str(), m.epochs.as_slice())).collect();
    write_metrics_csv(&out.join("metrics.csv"), &stages)?;
    let best = &run.outcome.best;
    save_checkpoint(
        &Checkpoint {
            config: cfg.clone(),
            model: best.clone(),
            hierarchy: ck.hierarchy.clone(),
            rng: run.retrain.get(run.outcome.best_pass.wrapping_sub(1)).map_or(ck.rng, |m| m.rng),
            stage: format!("prune_pass{}", run.outcome.best_pass),
        },
        &out.join("pruned.ckpt"),
    )?;
    println!("initial val_accuracy {:.4}", run.initial_accuracy);
    for r in &run.outcome.records {
        println!("pass {} pruned {} val_accuracy {:.4}", r.pass, r.pruned_total, r.val_accuracy);
    }
    println!(
        "best pass {} pruned {} of {} filters test_accuracy {:.4}",
        run.outcome.best_pass,
        best.pruned().pruned_count(),
        best.pruned().total_filters(),
        run.test.accuracy
    );
    Ok(())
}

fn evaluate_cmd(checkpoint: &Path, split: Split) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = prepare(&load_dataset(&ck.config)?, &ck.config)?;
    let (name, clips) = match split {
        Split::Val => ("val", &data.val),
        Split::Test => ("test", &data.test),
    };
    let eval = evaluate(&ck.model, clips, &ck.config.train)?;
    println!("{name}_accuracy {:?}", eval.accuracy);
    println!("{name}_loss {:?}", eval.loss);
    println!("clips {}", clips.len());
    Ok(())
}

fn attribution_cmd(checkpoint: &Path, head: usize, out: &Path, count: usize) -> Result<()> {
    if !(1..=NUM_STACKS).contains(&head) {
        return Err(Error::Usage(format!("--head must be 1 to {NUM_STACKS}, got {head}")));
    }
    let ck = load_checkpoint(checkpoint)?;
    let cfg = &ck.config;
    let data = prepare(&load_dataset(cfg)?, cfg)?;
    let clips: Vec<_> = data.val.iter().take(count.max(1)).collect();
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let targets = if head == NUM_STACKS {
        labels
    } else {
        match &ck.hierarchy {
            Some(h) => h.map_labels(head - 1, &labels)?,
            None => return Err(Error::Usage(format!("head {head} needs a checkpoint with a hierarchy"))),
        }
    };
    let samples = clips.iter().map(|c| eval_sample(c, &cfg.train, 0)).collect::<Result<Vec<_>>>()?;
    let map = gradient_attribution(&ck.model, &stack_samples(&samples)?, &targets, head - 1)?;
    write_attribution_csv(out, &map)?;
    let mean = map.data().iter().sum::<f64>() / map.numel() as f64;
    println!("head {head} clips {} map {:?} mean {mean:?}", clips.len(), map.shape());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Preprocess { common, out, frames_out } => preprocess(&common, &out, frames_out.as_deref()),
        Command::FitProjection { common, data } => fit_projection_cmd(&common, data.as_deref()),
        Command::Partition {
            common,
            confusion,
            levels,
            out,
        } => partition(&common, &confusion, &levels, out.as_deref()),
        Command::Train {
            common,
            out,
            first_pass_only,
        } => train_cmd(&common, &out, first_pass_only),
        Command::Prune { common, checkpoint, out } => prune_cmd(&common, &checkpoint, &out),
        Command::Evaluate { checkpoint, split } => evaluate_cmd(&checkpoint, split),
        Command::Attribution {
            checkpoint,
            head,
            out,
            clips,
        } => attribution_cmd(&checkpoint, head, &out, clips),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
