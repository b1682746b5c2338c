//! End-to-end pipelines over an [`ExperimentConfig`]: dataset loading,
//! cropping, the two training passes, hierarchy derivation and pruning.
//!
//! A dataset directory holds `labels.csv`, `skeletons.txt` (3D joints) and
//! per-clip frames under `frames/`, either `frames/<id>.hfrm` or a directory
//! `frames/<id>/` of numbered PGM/PPM images. `skeletons_2d.txt` is optional
//! and only read by the projection fit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hierarchy::{build_hierarchy, edge_costs, partition_cost, ConfusionMatrix, Hierarchy};
use crate::io::config::ConfusionMode;
use crate::io::formats::{
    read_hfrm, read_labels_csv, read_pnm_dir, read_skeletons, write_hfrm, write_labels_csv, write_skeletons, FrameStack,
    LabelRow,
};
use crate::io::ExperimentConfig;
use crate::model::{build_model, Model};
use crate::preprocess::{crop_rect_union, crop_resize, project, CropRect, SkeletonSequence};
use crate::pruning::{pruning_loop, PruneOutcome};
use crate::synthetic::{generate_synthetic, SyntheticDataset};
use crate::tensor::Tensor;
use crate::train::{evaluate, split_validation, train, Clip, Evaluation, Objective, RunMetrics, TrainConfig};

/// A clip before cropping: full frames `[T,C,H,W]` and 3D skeletons, one per person.
#[derive(Clone, Debug, PartialEq)]
pub struct RawClip {
    pub id: u64,
    pub label: usize,
    pub train: bool,
    pub frames: Tensor,
    pub skeletons: Vec<SkeletonSequence>,
}

impl RawClip {
    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }
}

pub fn raw_from_synthetic(data: &SyntheticDataset) -> Vec<RawClip> {
    data.clips
        .iter()
        .map(|c| RawClip {
            id: c.id,
            label: c.label,
            train: c.train,
            frames: c.frames_tensor(),
            skeletons: vec![c.skeleton_3d.clone()],
        })
        .collect()
}

/// Write a generated dataset in the directory layout read by [`load_dataset_dir`].
pub fn write_dataset(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let labels: Vec<LabelRow> = data
        .clips
        .iter()
        .map(|c| LabelRow {
            clip_id: c.id,
            label: c.label,
            train: c.train,
        })
        .collect();
    write_labels_csv(&dir.join("labels.csv"), &labels)?;
    let sk3: Vec<(u64, &[SkeletonSequence])> = data.clips.iter().map(|c| (c.id, std::slice::from_ref(&c.skeleton_3d))).collect();
    write_skeletons(&dir.join("skeletons.txt"), &sk3)?;
    let sk2: Vec<(u64, &[SkeletonSequence])> = data.clips.iter().map(|c| (c.id, std::slice::from_ref(&c.skeleton_2d))).collect();
    write_skeletons(&dir.join("skeletons_2d.txt"), &sk2)?;
    for c in &data.clips {
        let stack = FrameStack::new([c.num_frames(), 1, c.height, c.width], c.frames.clone())?;
        write_hfrm(&frames_dir.join(format!("{}.hfrm", c.id)), &stack)?;
    }
    Ok(())
}

fn read_frames(dir: &Path, id: u64) -> Result<Tensor> {
    let file = dir.join("frames").join(format!("{id}.hfrm"));
    if file.is_file() {
        return read_hfrm(&file);
    }
    let sub = dir.join("frames").join(id.to_string());
    if sub.is_dir() {
        return Ok(read_pnm_dir(&sub)?.to_tensor());
    }
    Err(Error::Data(format!("no frames for clip {id} under {}", dir.join("frames").display())))
}

pub fn load_dataset_dir(dir: &Path) -> Result<Vec<RawClip>> {
    let labels = read_labels_csv(&dir.join("labels.csv"))?;
    let mut skeletons = read_skeletons(&dir.join("skeletons.txt"))?;
    labels
        .into_iter()
        .map(|row| {
            let skeletons = skeletons
                .remove(&row.clip_id)
                .ok_or_else(|| Error::Data(format!("clip {} has no skeleton in skeletons.txt", row.clip_id)))?;
            Ok(RawClip {
                id: row.clip_id,
                label: row.label,
                train: row.train,
                frames: read_frames(dir, row.clip_id)?,
                skeletons,
            })
        })
        .collect()
}

/// Clips named by the config: its dataset directory, or freshly generated synthetic data.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<RawClip>> {
    match &cfg.data_dir {
        Some(dir) => load_dataset_dir(dir),
        None => Ok(raw_from_synthetic(&generate_synthetic(&cfg.synth)?)),
    }
}

/// Crop rectangle of a clip: projected joints of every person, margin-expanded.
pub fn clip_crop(clip: &RawClip, cfg: &ExperimentConfig) -> Result<CropRect> {
    let (w, h) = (clip.width(), clip.height());
    if !cfg.preprocess.crop {
        return Ok(CropRect::full(w, h));
    }
    let params = cfg.projection.resolve(w, h);
    let projected = clip
        .skeletons
        .iter()
        .map(|s| if s.dims() == 2 { Ok(s.clone()) } else { project(s, &params) })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Crop(format!("clip {}: {e}", clip.id)))?;
    let refs: Vec<&SkeletonSequence> = projected.iter().collect();
    crop_rect_union(&refs, w, h, cfg.preprocess.margin).map_err(|e| Error::Crop(format!("clip {}: {e}", clip.id)))
}

pub fn prepare_clip(clip: &RawClip, cfg: &ExperimentConfig) -> Result<(Clip, CropRect)> {
    let rect = clip_crop(clip, cfg)?;
    let frames = crop_resize(&clip.frames, rect, cfg.preprocess.resize_h, cfg.preprocess.resize_w)?;
    Ok((
        Clip {
            id: clip.id,
            label: clip.label,
            frames,
        },
        rect,
    ))
}

/// Cropped clips split three ways; validation is drawn from the test split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
    pub crops: Vec<(u64, CropRect)>,
}

pub fn prepare(raw: &[RawClip], cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut train_set = Vec::new();
    let mut test_pool = Vec::new();
    let mut crops = Vec::with_capacity(raw.len());
    for r in raw {
        let (clip, rect) = prepare_clip(r, cfg)?;
        crops.push((r.id, rect));
        if r.train {
            train_set.push(clip);
        } else {
            test_pool.push(clip);
        }
    }
    let (val, test) = split_validation(&test_pool, cfg.train.validation_fraction, cfg.train.seed)?;
    Ok(PreparedData {
        train: train_set,
        val,
        test,
        crops,
    })
}

pub fn hierarchy_confusion(metrics: &RunMetrics, mode: ConfusionMode) -> &ConfusionMatrix {
    match mode {
        ConfusionMode::Soft => &metrics.soft_confusion,
        ConfusionMode::Hard => &metrics.confusion,
    }
}

pub fn derive_hierarchy(c: &ConfusionMatrix, cfg: &ExperimentConfig) -> Result<Hierarchy> {
    build_hierarchy(&edge_costs(c), &cfg.hierarchy.levels, cfg.hierarchy.restarts, cfg.train.seed)
}

/// Cross-superclass confusion of each coarse level.
pub fn level_costs(h: &Hierarchy, c: &ConfusionMatrix) -> Result<Vec<f64>> {
    let e = edge_costs(c);
    h.coarse_levels().iter().map(|l| partition_cost(&l.assignment, &e)).collect()
}

#[derive(Clone, Debug)]
pub struct PassOutcome {
    pub model: Model,
    pub metrics: RunMetrics,
    pub test: Evaluation,
}

pub fn run_first_pass(data: &PreparedData, cfg: &ExperimentConfig) -> Result<PassOutcome> {
    let model = build_model(&cfg.model, cfg.train.seed)?;
    run_pass(model, data, &Objective::FinalHead, &cfg.train)
}

/// Second pass from a fresh initialization, or from `warm` when `train.warm_start` is set.
pub fn run_second_pass(data: &PreparedData, hierarchy: &Hierarchy, warm: Option<&Model>, cfg: &ExperimentConfig) -> Result<PassOutcome> {
    let model = match (cfg.train.warm_start, warm) {
        (true, Some(m)) => m.clone(),
        (true, None) => return Err(Error::Usage("warm start needs first-pass weights".into())),
        (false, _) => build_model(&cfg.model, cfg.train.seed)?,
    };
    run_pass(model, data, &Objective::Hierarchical(hierarchy.clone()), &cfg.train)
}

fn run_pass(model: Model, data: &PreparedData, objective: &Objective, cfg: &TrainConfig) -> Result<PassOutcome> {
    let (model, metrics) = train(model, &data.train, &data.val, objective, cfg)?;
    let test = if data.test.is_empty() {
        evaluate(&model, &data.val, cfg)?
    } else {
        evaluate(&model, &data.test, cfg)?
    };
    Ok(PassOutcome { model, metrics, test })
}

#[derive(Clone, Debug)]
pub struct TwoPassOutcome {
    pub first: PassOutcome,
    pub hierarchy: Hierarchy,
    pub second: PassOutcome,
}

pub fn run_two_pass(data: &PreparedData, cfg: &ExperimentConfig) -> Result<TwoPassOutcome> {
    cfg.validate()?;
    let first = run_first_pass(data, cfg)?;
    let hierarchy = derive_hierarchy(hierarchy_confusion(&first.metrics, cfg.hierarchy.confusion), cfg)?;
    let second = run_second_pass(data, &hierarchy, Some(&first.model), cfg)?;
    Ok(TwoPassOutcome { first, hierarchy, second })
}

#[derive(Clone, Debug)]
pub struct PruneRun {
    pub outcome: PruneOutcome,
    /// Validation accuracy of the model before pruning.
    pub initial_accuracy: f64,
    /// Retraining metrics of every pass, in order.
    pub retrain: Vec<RunMetrics>,
    pub test: Evaluation,
}

/// Prune `model` with retraining after every pass, under `objective`.
///
/// Pass `k` retrains for `prune.retrain_epochs` epochs with seed `train.seed + k`.
pub fn run_pruning(model: Model, data: &PreparedData, objective: &Objective, cfg: &ExperimentConfig) -> Result<PruneRun> {
    let initial = evaluate(&model, &data.val, &cfg.train)?.accuracy;
    let mut retrain = Vec::new();
    let outcome = pruning_loop(
        model,
        |m, pass| {
            let pass_cfg = TrainConfig {
                epochs: cfg.prune.retrain_epochs,
                seed: cfg.train.seed.wrapping_add(pass as u64),
                ..cfg.train.clone()
            };
            let (trained, metrics) = train(m.clone(), &data.train, &data.val, objective, &pass_cfg)?;
            *m = trained;
            let acc = metrics.final_accuracy;
            retrain.push(metrics);
            Ok(acc)
        },
        cfg.prune.p,
        cfg.prune.variant,
        cfg.prune.max_passes,
        initial,
    )?;
    let test_set = if data.test.is_empty() { &data.val } else { &data.test };
    let test = evaluate(&outcome.best, test_set, &cfg.train)?;
    Ok(PruneRun {
        outcome,
        initial_accuracy: initial,
        retrain,
        test,
    })
}

/// Human-readable summary of a two-pass run.
pub fn report(run: &TwoPassOutcome, c: &ConfusionMatrix) -> Result<String> {
    let mut out = String::new();
    let pass_lines = |name: &str, p: &PassOutcome, out: &mut String| {
        let last = p.metrics.epochs.last().expect("at least one epoch");
        out.push_str(&format!(
            "{name}: epochs {} val_accuracy {:.4} test_accuracy {:.4} val_loss {:.6}\n",
            p.metrics.epochs.len(),
            p.metrics.final_accuracy,
            p.test.accuracy,
            last.val_loss
        ));
        let heads: Vec<String> = last
            .head_losses
            .iter()
            .enumerate()
            .map(|(i, h)| match h {
                Some(v) => format!("head{} {v:.6}", i + 1),
                None => format!("head{} -", i + 1),
            })
            .collect();
        out.push_str(&format!("{name}: train_loss {:.6} {}\n", last.train_loss, heads.join(" ")));
    };
    pass_lines("first_pass", &run.first, &mut out);
    out.push_str("hierarchy:\n");
    for (l, (level, cost)) in run.hierarchy.coarse_levels().iter().zip(level_costs(&run.hierarchy, c)?).enumerate() {
        let groups: Vec<String> = level
            .groups()
            .iter()
            .map(|g| format!("{{{}}}", g.iter().map(usize::to_string).collect::<Vec<_>>().join(",")))
            .collect();
        out.push_str(&format!("  level {l} K={} cost {cost:.6} {}\n", level.num_superclasses, groups.join(" ")));
    }
    pass_lines("second_pass", &run.second, &mut out);
    Ok(out)
}
