//! L2-norm filter pruning of the stack convolutions.
//!
//! Filters (output channels) are ranked by the L2 norm of their weights and the
//! lowest `p` fraction of the still-alive filters is zeroed, either across all
//! stack layers at once or within each layer. Pruned filters stay dead: their
//! weights, bias and normalization affine parameters are zero and their
//! gradients are masked during retraining.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::model::Model;

/// Per prunable layer, `true` marks a pruned output channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn empty(filters_per_layer: &[usize]) -> Self {
        PruneMask {
            layers: filters_per_layer.iter().map(|&n| vec![false; n]).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<bool>>) -> Self {
        PruneMask { layers }
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn pruned_count(&self) -> usize {
        self.layers.iter().flatten().filter(|&&d| d).count()
    }

    pub fn total_filters(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    fn check_compatible(&self, other: &PruneMask) -> Result<()> {
        let a: Vec<usize> = self.layers.iter().map(Vec::len).collect();
        let b: Vec<usize> = other.layers.iter().map(Vec::len).collect();
        if a != b {
            return Err(Error::Shape(format!("prune masks over {a:?} and {b:?} filters")));
        }
        Ok(())
    }

    pub fn union(&self, other: &PruneMask) -> Result<PruneMask> {
        self.check_compatible(other)?;
        Ok(PruneMask {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x || *y).collect())
                .collect(),
        })
    }

    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.check_compatible(other).is_ok()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| !*x || *y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorms {
    pub name: String,
    pub norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterNormTable {
    pub layers: Vec<LayerNorms>,
}

impl FilterNormTable {
    fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.norms.len()).collect()
    }
}

/// L2 norm of each filter's weights (bias excluded) for every stack convolution.
pub fn filter_norms(model: &Model) -> FilterNormTable {
    let layers = model
        .prunable_layers()
        .iter()
        .map(|l| {
            let co = l.out_channels();
            let per = l.weight.numel() / co;
            LayerNorms {
                name: l.name.clone(),
                norms: l
                    .weight
                    .data()
                    .chunks(per)
                    .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect(),
            }
        })
        .collect();
    FilterNormTable { layers }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneVariant {
    /// Rank all stack filters together.
    Global,
    /// Rank within each layer independently.
    PerLayer,
}

impl fmt::Display for PruneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneVariant::Global => "global",
            PruneVariant::PerLayer => "per_layer",
        })
    }
}

impl std::str::FromStr for PruneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PruneVariant::Global),
            "per_layer" | "per-layer" => Ok(PruneVariant::PerLayer),
            other => Err(Error::Config(format!("unknown pruning variant `{other}`"))),
        }
    }
}

/// `floor(p * remaining)`, tolerant of representation error in `p` (0.1 * 70 is 7).
pub fn prune_count(p: f64, remaining: usize) -> usize {
    (p * remaining as f64 + 1e-9).floor() as usize
}

fn check_ratio(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("pruning ratio {p} outside (0, 1)")))
    }
}

fn by_norm(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Newly pruned filters: the lowest `floor(p * alive)` across all layers.
pub fn select_global(table: &FilterNormTable, p: f64, already: &PruneMask) -> Result<PruneMask> {
    check_ratio(p)?;
    let mut delta = PruneMask::empty(&table.sizes());
    delta.check_compatible(already)?;
    let mut alive: Vec<(f64, usize, usize)> = Vec::new();
    for (li, layer) in table.layers.iter().enumerate() {
        for (fi, &n) in layer.norms.iter().enumerate() {
            if !already.layers[li][fi] {
                alive.push((n, li, fi));
            }
        }
    }
    alive.sort_by(by_norm);
    for &(_, li, fi) in alive.iter().take(prune_count(p, alive.len())) {
        delta.layers[li][fi] = true;
    }
    Ok(delta)
}

/// Newly pruned filters: the lowest `floor(p * alive_in_layer)` of every layer.
pub fn select_per_layer(table: &FilterNormTable, p: f64, already: &PruneMask) -> Result<PruneMask> {
    check_ratio(p)?;
    let mut delta = PruneMask::empty(&table.sizes());
    delta.check_compatible(already)?;
    for (li, layer) in table.layers.iter().enumerate() {
        let mut alive: Vec<(f64, usize, usize)> = layer
            .norms
            .iter()
            .enumerate()
            .filter(|(fi, _)| !already.layers[li][*fi])
            .map(|(fi, &n)| (n, li, fi))
            .collect();
        alive.sort_by(by_norm);
        for &(_, _, fi) in alive.iter().take(prune_count(p, alive.len())) {
            delta.layers[li][fi] = true;
        }
    }
    Ok(delta)
}

pub fn select(variant: PruneVariant, table: &FilterNormTable, p: f64, already: &PruneMask) -> Result<PruneMask> {
    match variant {
        PruneVariant::Global => select_global(table, p, already),
        PruneVariant::PerLayer => select_per_layer(table, p, already),
    }
}

/// Merge `mask` into the model's pruned set and zero the affected filters.
pub fn apply_mask(model: &mut Model, mask: &PruneMask) -> Result<()> {
    let merged = model.pruned().union(mask)?;
    for (layer, dead) in model.layers_mut()[1..].iter_mut().zip(merged.layers()) {
        let per = layer.weight.numel() / dead.len();
        for (c, _) in dead.iter().enumerate().filter(|(_, d)| **d) {
            layer.weight.data_mut()[c * per..(c + 1) * per].fill(0.0);
            layer.bias.data_mut()[c] = 0.0;
            layer.gamma.data_mut()[c] = 0.0;
            layer.beta.data_mut()[c] = 0.0;
        }
    }
    model.set_pruned(merged);
    Ok(())
}

/// Stop after two consecutive scores below the best seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct StopRule {
    best: f64,
    best_pass: usize,
    below_streak: usize,
}

impl StopRule {
    /// `initial` is the unpruned model's score, recorded as pass 0.
    pub fn new(initial: f64) -> Self {
        StopRule {
            best: initial,
            best_pass: 0,
            below_streak: 0,
        }
    }

    /// Record a pass score; returns `true` when pruning should stop.
    pub fn observe(&mut self, pass: usize, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.best_pass = pass;
            self.below_streak = 0;
        } else if score < self.best {
            self.below_streak += 1;
        } else {
            self.below_streak = 0;
        }
        self.below_streak >= 2
    }

    pub fn best_pass(&self) -> usize {
        self.best_pass
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Replay the stop rule over per-pass scores.
///
/// Returns `(best_pass, last_pass_run)`; passes are numbered from 1.
pub fn replay_stop_rule(initial: f64, scores: &[f64]) -> (usize, usize) {
    let mut rule = StopRule::new(initial);
    for (i, &s) in scores.iter().enumerate() {
        if rule.observe(i + 1, s) {
            return (rule.best_pass(), i + 1);
        }
    }
    (rule.best_pass(), scores.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassRecord {
    pub pass: usize,
    pub variant: PruneVariant,
    pub pruned_total: usize,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub best: Model,
    pub best_pass: usize,
    pub records: Vec<PassRecord>,
}

/// Iteratively prune and retrain until the stop rule fires or `max_passes` is reached.
///
/// `retrain` receives the freshly masked model and the pass number and returns
/// its validation accuracy. The best-scoring model (pass 0 being the input) is
/// returned.
pub fn pruning_loop<F>(
    model: Model,
    mut retrain: F,
    p: f64,
    variant: PruneVariant,
    max_passes: usize,
    initial_score: f64,
) -> Result<PruneOutcome>
where
    F: FnMut(&mut Model, usize) -> Result<f64>,
{
    check_ratio(p)?;
    if model.trained_epochs() == 0 {
        return Err(Error::Usage("pruning needs a trained model".into()));
    }
    let mut rule = StopRule::new(initial_score);
    let mut best = model.clone();
    let mut current = model;
    let mut records = Vec::new();
    for pass in 1..=max_passes {
        let table = filter_norms(&current);
        let delta = select(variant, &table, p, current.pruned())?;
        apply_mask(&mut current, &delta)?;
        let score = retrain(&mut current, pass)?;
        records.push(PassRecord {
            pass,
            variant,
            pruned_total: current.pruned().pruned_count(),
            val_accuracy: score,
        });
        let stop = rule.observe(pass, score);
        if rule.best_pass() == pass {
            best = current.clone();
        }
        if stop {
            break;
        }
    }
    Ok(PruneOutcome {
        best,
        best_pass: rule.best_pass(),
        records,
    })
}
