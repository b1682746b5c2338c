//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, and
//! unknown keys are rejected with their line number. [`ExperimentConfig::to_text`]
//! writes every key and parses back to the same configuration.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{StackConfig, NUM_STACKS};
use crate::preprocess::ProjectionParams;
use crate::pruning::PruneVariant;
use crate::synthetic::SyntheticSpec;
use crate::train::TrainConfig;

use super::formats::fmt_f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfusionMode {
    /// Averaged softmax vectors summed per true class.
    Soft,
    /// Counts of argmax predictions.
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub crop: bool,
    pub margin: f64,
    pub resize_h: usize,
    pub resize_w: usize,
}

/// Projection coefficients; `None` biases mean the frame center.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub c_x: f64,
    pub c_y: f64,
    pub b_x: Option<f64>,
    pub b_y: Option<f64>,
}

impl ProjectionConfig {
    pub fn resolve(&self, width: usize, height: usize) -> ProjectionParams {
        ProjectionParams {
            c_x: self.c_x,
            c_y: self.c_y,
            b_x: self.b_x.unwrap_or(width as f64 / 2.0),
            b_y: self.b_y.unwrap_or(height as f64 / 2.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyConfig {
    /// Superclass counts of the coarse heads.
    pub levels: Vec<usize>,
    pub restarts: usize,
    pub confusion: ConfusionMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    pub p: f64,
    pub variant: PruneVariant,
    pub max_passes: usize,
    pub retrain_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Dataset directory; `None` generates synthetic data from `synth`.
    pub data_dir: Option<PathBuf>,
    pub synth: SyntheticSpec,
    pub preprocess: PreprocessConfig,
    pub projection: ProjectionConfig,
    pub model: StackConfig,
    pub hierarchy: HierarchyConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let proj = ProjectionParams::default();
        let model = StackConfig::default();
        ExperimentConfig {
            data_dir: None,
            synth: SyntheticSpec::default(),
            preprocess: PreprocessConfig {
                crop: true,
                margin: 0.10,
                resize_h: 40,
                resize_w: 40,
            },
            projection: ProjectionConfig {
                c_x: proj.c_x,
                c_y: proj.c_y,
                b_x: None,
                b_y: None,
            },
            hierarchy: HierarchyConfig {
                levels: model.num_classes_per_head[..NUM_STACKS - 1].to_vec(),
                restarts: 1000,
                confusion: ConfusionMode::Soft,
            },
            model,
            train: TrainConfig::default(),
            prune: PruneConfig {
                p: 0.10,
                variant: PruneVariant::Global,
                max_passes: 10,
                retrain_epochs: 20,
            },
        }
    }
}

pub const KEYS: &[&str] = &[
    "data.dir",
    "synth.classes",
    "synth.superfamilies",
    "synth.clips_per_class",
    "synth.width",
    "synth.height",
    "synth.clip_len",
    "synth.clutter",
    "synth.offset_range",
    "synth.joints",
    "synth.train_fraction",
    "synth.seed",
    "preprocess.crop",
    "preprocess.margin",
    "preprocess.resize_h",
    "preprocess.resize_w",
    "projection.c_x",
    "projection.c_y",
    "projection.b_x",
    "projection.b_y",
    "model.in_channels",
    "model.blocks",
    "model.base_channels",
    "model.bottleneck",
    "model.temporal_kernel",
    "model.heads",
    "hierarchy.levels",
    "hierarchy.restarts",
    "hierarchy.confusion",
    "train.epochs",
    "train.lr",
    "train.lr_decay",
    "train.patience",
    "train.batch_size",
    "train.seed",
    "train.weights",
    "train.crop_size",
    "train.frames",
    "train.eval_samples",
    "train.validation_fraction",
    "train.warm_start",
    "prune.p",
    "prune.variant",
    "prune.max_passes",
    "prune.retrain_epochs",
];

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

fn array<T: FromStr + Copy + std::fmt::Debug>(v: &str) -> std::result::Result<[T; NUM_STACKS], String> {
    let items: Vec<T> = list(v)?;
    items.try_into().map_err(|items: Vec<T>| format!("expected {NUM_STACKS} comma-separated values, got {}", items.len()))
}

fn auto(v: &str) -> std::result::Result<Option<f64>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.synth;
        Some(match key {
            "data.dir" => self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "synth.classes" => s.num_classes.to_string(),
            "synth.superfamilies" => s.superfamilies.to_string(),
            "synth.clips_per_class" => s.clips_per_class.to_string(),
            "synth.width" => s.width.to_string(),
            "synth.height" => s.height.to_string(),
            "synth.clip_len" => s.clip_len.to_string(),
            "synth.clutter" => fmt_f64(s.clutter),
            "synth.offset_range" => fmt_f64(s.offset_range),
            "synth.joints" => s.joints.to_string(),
            "synth.train_fraction" => fmt_f64(s.train_fraction),
            "synth.seed" => s.seed.to_string(),
            "preprocess.crop" => self.preprocess.crop.to_string(),
            "preprocess.margin" => fmt_f64(self.preprocess.margin),
            "preprocess.resize_h" => self.preprocess.resize_h.to_string(),
            "preprocess.resize_w" => self.preprocess.resize_w.to_string(),
            "projection.c_x" => fmt_f64(self.projection.c_x),
            "projection.c_y" => fmt_f64(self.projection.c_y),
            "projection.b_x" => self.projection.b_x.map_or("auto".into(), fmt_f64),
            "projection.b_y" => self.projection.b_y.map_or("auto".into(), fmt_f64),
            "model.in_channels" => self.model.in_channels.to_string(),
            "model.blocks" => join(&self.model.blocks_per_stack),
            "model.base_channels" => self.model.base_channels.to_string(),
            "model.bottleneck" => self.model.bottleneck.to_string(),
            "model.temporal_kernel" => self.model.temporal_kernel.to_string(),
            "model.heads" => join(&self.model.num_classes_per_head),
            "hierarchy.levels" => join(&self.hierarchy.levels),
            "hierarchy.restarts" => self.hierarchy.restarts.to_string(),
            "hierarchy.confusion" => match self.hierarchy.confusion {
                ConfusionMode::Soft => "soft".into(),
                ConfusionMode::Hard => "hard".into(),
            },
            "train.epochs" => self.train.epochs.to_string(),
            "train.lr" => fmt_f64(self.train.learning_rate),
            "train.lr_decay" => fmt_f64(self.train.lr_decay),
            "train.patience" => self.train.patience.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.weights" => join_f64(&self.train.loss_weights),
            "train.crop_size" => self.train.crop_size.to_string(),
            "train.frames" => self.train.frames_per_clip.to_string(),
            "train.eval_samples" => self.train.eval_samples.to_string(),
            "train.validation_fraction" => fmt_f64(self.train.validation_fraction),
            "train.warm_start" => self.train.warm_start.to_string(),
            "prune.p" => fmt_f64(self.prune.p),
            "prune.variant" => self.prune.variant.to_string(),
            "prune.max_passes" => self.prune.max_passes.to_string(),
            "prune.retrain_epochs" => self.prune.retrain_epochs.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.synth;
        match key {
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth.classes" => s.num_classes = num(v)?,
            "synth.superfamilies" => s.superfamilies = num(v)?,
            "synth.clips_per_class" => s.clips_per_class = num(v)?,
            "synth.width" => s.width = num(v)?,
            "synth.height" => s.height = num(v)?,
            "synth.clip_len" => s.clip_len = num(v)?,
            "synth.clutter" => s.clutter = num(v)?,
            "synth.offset_range" => s.offset_range = num(v)?,
            "synth.joints" => s.joints = num(v)?,
            "synth.train_fraction" => s.train_fraction = num(v)?,
            "synth.seed" => s.seed = num(v)?,
            "preprocess.crop" => self.preprocess.crop = boolean(v)?,
            "preprocess.margin" => self.preprocess.margin = num(v)?,
            "preprocess.resize_h" => self.preprocess.resize_h = num(v)?,
            "preprocess.resize_w" => self.preprocess.resize_w = num(v)?,
            "projection.c_x" => self.projection.c_x = num(v)?,
            "projection.c_y" => self.projection.c_y = num(v)?,
            "projection.b_x" => self.projection.b_x = auto(v)?,
            "projection.b_y" => self.projection.b_y = auto(v)?,
            "model.in_channels" => self.model.in_channels = num(v)?,
            "model.blocks" => self.model.blocks_per_stack = array(v)?,
            "model.base_channels" => self.model.base_channels = num(v)?,
            "model.bottleneck" => self.model.bottleneck = boolean(v)?,
            "model.temporal_kernel" => self.model.temporal_kernel = num(v)?,
            "model.heads" => self.model.num_classes_per_head = array(v)?,
            "hierarchy.levels" => self.hierarchy.levels = list(v)?,
            "hierarchy.restarts" => self.hierarchy.restarts = num(v)?,
            "hierarchy.confusion" => {
                self.hierarchy.confusion = match v {
                    "soft" => ConfusionMode::Soft,
                    "hard" => ConfusionMode::Hard,
                    _ => return Err(format!("expected soft or hard, got {v:?}")),
                }
            }
            "train.epochs" => self.train.epochs = num(v)?,
            "train.lr" => self.train.learning_rate = num(v)?,
            "train.lr_decay" => self.train.lr_decay = num(v)?,
            "train.patience" => self.train.patience = num(v)?,
            "train.batch_size" => self.train.batch_size = num(v)?,
            "train.seed" => self.train.seed = num(v)?,
            "train.weights" => self.train.loss_weights = array(v)?,
            "train.crop_size" => self.train.crop_size = num(v)?,
            "train.frames" => self.train.frames_per_clip = num(v)?,
            "train.eval_samples" => self.train.eval_samples = num(v)?,
            "train.validation_fraction" => self.train.validation_fraction = num(v)?,
            "train.warm_start" => self.train.warm_start = boolean(v)?,
            "prune.p" => self.prune.p = num(v)?,
            "prune.variant" => self.prune.variant = v.parse().map_err(|e: Error| e.to_string())?,
            "prune.max_passes" => self.prune.max_passes = num(v)?,
            "prune.retrain_epochs" => self.prune.retrain_epochs = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parse configuration text; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigLine {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            cfg.set(key, value.trim()).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let sec = key.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = sec;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.projection.resolve(1, 1).validate()?;
        if self.hierarchy.levels[..] != self.model.num_classes_per_head[..NUM_STACKS - 1] {
            return Err(Error::Config(format!(
                "hierarchy.levels {:?} must equal the first {} head widths {:?}",
                self.hierarchy.levels,
                NUM_STACKS - 1,
                self.model.num_classes_per_head
            )));
        }
        if self.hierarchy.restarts == 0 {
            return Err(Error::Config("hierarchy.restarts must be at least 1".into()));
        }
        if !(self.preprocess.margin >= 0.0) {
            return Err(Error::Config(format!("preprocess.margin must be nonnegative, got {}", self.preprocess.margin)));
        }
        if self.train.crop_size > self.preprocess.resize_h.min(self.preprocess.resize_w) {
            return Err(Error::Config(format!(
                "train.crop_size {} exceeds the resized frame {}x{}",
                self.train.crop_size, self.preprocess.resize_h, self.preprocess.resize_w
            )));
        }
        if !(self.prune.p > 0.0 && self.prune.p < 1.0) {
            return Err(Error::Config(format!("prune.p must lie in (0, 1), got {}", self.prune.p)));
        }
        if self.prune.retrain_epochs == 0 {
            return Err(Error::Config("prune.retrain_epochs must be at least 1".into()));
        }
        Ok(())
    }
}
