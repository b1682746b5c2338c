//! Two-pass training, plateau learning-rate decay and multi-sample evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hierarchy::{hierarchical_loss, ConfusionMatrix, Hierarchy};
use crate::model::{Model, NUM_STACKS};
use crate::preprocess::{augment, gather_frames, sample_frames};
use crate::tensor::{softmax_rows, Graph, Tensor, Var};
use crate::Mode;

/// A preprocessed clip: frames `[T,C,H,W]` already cropped and rescaled.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: u64,
    pub label: usize,
    pub frames: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: [f64; NUM_STACKS],
    pub crop_size: usize,
    pub frames_per_clip: usize,
    pub eval_samples: usize,
    pub validation_fraction: f64,
    /// Start the second pass from first-pass weights instead of a fresh init.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-4,
            lr_decay: 10.0,
            patience: 2,
            batch_size: 8,
            seed: 0,
            loss_weights: [0.125, 0.25, 0.5, 1.0],
            crop_size: 32,
            frames_per_clip: 8,
            eval_samples: 5,
            validation_fraction: 0.10,
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay >= 1.0) {
            return bad(format!("train.lr_decay must be at least 1, got {}", self.lr_decay));
        }
        if self.patience == 0 || self.batch_size == 0 || self.frames_per_clip == 0 || self.eval_samples == 0 {
            return bad("patience, batch size, frames per clip and eval samples must be positive".into());
        }
        if self.crop_size == 0 {
            return bad("train.crop_size must be positive".into());
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(self.loss_weights[NUM_STACKS - 1] > 0.0) {
            return bad(format!(
                "loss weights must be nonnegative with a positive last weight, got {:?}",
                self.loss_weights
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.numel() != g.len()) {
            return Err(Error::Shape("parameter and gradient lists disagree".into()));
        }
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training {
                epoch: 0,
                message: format!("non-finite gradient for parameter {i}"),
            });
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Divide the rate by `factor` after `patience` epochs without a strictly
/// lower validation loss; the count restarts after every decay.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feed one epoch's validation loss and return the rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr /= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Rate after the last entry of `history`, given the rate in force before it,
/// with decay factor 10 and patience 2.
pub fn lr_schedule(history: &[f64], current_lr: f64) -> f64 {
    let mut s = PlateauSchedule::new(1.0, 10.0, 2);
    let mut before = 1.0;
    for &loss in history {
        before = s.lr;
        s.observe(loss);
    }
    if s.lr < before {
        current_lr / 10.0
    } else {
        current_lr
    }
}

/// Seeded split into `(validation, remainder)`, preserving order within each part.
pub fn split_validation<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Data("cannot split an empty set".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let n_val = (fraction * items.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; items.len()];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut val, mut rest) = (Vec::new(), Vec::new());
    for (i, item) in items.iter().enumerate() {
        if is_val[i] { &mut val } else { &mut rest }.push(item.clone());
    }
    Ok((val, rest))
}

/// What the training loss is made of.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Cross-entropy of the last head only, scaled by the last loss weight.
    FinalHead,
    /// Weighted per-head cross-entropy against a hierarchy.
    Hierarchical(Hierarchy),
}

impl Objective {
    fn check(&self, model: &Model) -> Result<()> {
        if let Objective::Hierarchical(h) = self {
            let heads = model.config().num_classes_per_head;
            if h.widths() != heads {
                return Err(Error::Shape(format!(
                    "hierarchy widths {:?} do not match head widths {heads:?}",
                    h.widths()
                )));
            }
        }
        Ok(())
    }

    /// Total loss and the unweighted per-head terms it was built from.
    fn build(&self, g: &mut Graph, logits: &[Var], labels: &[usize], weights: &[f64; NUM_STACKS]) -> Result<(Var, Vec<Option<Var>>)> {
        match self {
            Objective::FinalHead => {
                let ce = g.softmax_cross_entropy(logits[NUM_STACKS - 1], labels)?;
                let total = g.scale(ce, weights[NUM_STACKS - 1]);
                let mut heads = vec![None; NUM_STACKS];
                heads[NUM_STACKS - 1] = Some(ce);
                Ok((total, heads))
            }
            Objective::Hierarchical(h) => {
                let out = hierarchical_loss(g, logits, labels, h, weights)?;
                Ok((out.total, out.per_head.into_iter().map(Some).collect()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean unweighted cross-entropy per head; `None` for heads outside the objective.
    pub head_losses: [Option<f64>; NUM_STACKS],
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Position of the training generator when a run ended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Validation accuracy after the last epoch.
    pub final_accuracy: f64,
    /// Hard-count validation confusion of the final head.
    pub confusion: ConfusionMatrix,
    /// Validation confusion accumulated from averaged probabilities.
    pub soft_confusion: ConfusionMatrix,
    pub rng: RngState,
}

/// Model input `[C,T,H,W]` from sampled and augmented frames `[T,C,H,W]`.
fn to_channels_first(frames: &Tensor) -> Tensor {
    let s = frames.shape();
    let (t, c, plane) = (s[0], s[1], s[2] * s[3]);
    let src = frames.data();
    let mut out = Vec::with_capacity(src.len());
    for ci in 0..c {
        for ti in 0..t {
            let start = (ti * c + ci) * plane;
            out.extend_from_slice(&src[start..start + plane]);
        }
    }
    Tensor::new(vec![c, t, s[2], s[3]], out).expect("same volume")
}

fn clip_sample(clip: &Clip, cfg: &TrainConfig, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let idx = sample_frames(clip.frames.shape()[0], cfg.frames_per_clip, mode, rng);
    let picked = gather_frames(&clip.frames, &idx)?;
    Ok(to_channels_first(&augment(&picked, mode, cfg.crop_size, rng)?))
}

/// Training sample: random offset, flip and crop.
pub fn train_sample(clip: &Clip, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    clip_sample(clip, cfg, Mode::Train, rng)
}

/// Evaluation sample `k` of a clip: redrawn segment offset, center crop, no flip.
pub fn eval_sample(clip: &Clip, cfg: &TrainConfig, k: usize) -> Result<Tensor> {
    let mut rng = eval_rng(cfg.seed, clip.id);
    let mut out = None;
    for _ in 0..=k {
        let idx = sample_frames(clip.frames.shape()[0], cfg.frames_per_clip, Mode::Train, &mut rng);
        out = Some(idx);
    }
    let picked = gather_frames(&clip.frames, &out.expect("k >= 0"))?;
    Ok(to_channels_first(&augment(&picked, Mode::Test, cfg.crop_size, &mut rng)?))
}

fn eval_rng(seed: u64, clip_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c_7561_7465);
    rng.set_stream(clip_id);
    rng
}

/// Stack equally shaped samples along a new leading batch axis.
pub fn stack_samples(samples: &[Tensor]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Shape("cannot stack an empty batch".into()));
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].shape());
    let mut data = Vec::with_capacity(samples.len() * samples[0].numel());
    for s in samples {
        if s.shape() != samples[0].shape() {
            return Err(Error::Shape(format!("clips disagree in shape: {:?} vs {:?}", samples[0].shape(), s.shape())));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::new(shape, data)
}

fn check_labels(clips: &[Clip], n: usize) -> Result<()> {
    match clips.iter().find(|c| c.label >= n) {
        Some(c) => Err(Error::Data(format!("clip {} has label {} but the model has {n} classes", c.id, c.label))),
        None => Ok(()),
    }
}

/// Per-clip evaluation under the averaged-sampling protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Objective loss averaged over every sampling of every clip.
    pub loss: f64,
    /// Final-head probabilities averaged over samplings, one row per clip.
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub soft_confusion: ConfusionMatrix,
}

fn evaluate_with(model: &Model, clips: &[Clip], objective: &Objective, cfg: &TrainConfig) -> Result<Evaluation> {
    let n = model.config().num_classes();
    check_labels(clips, n)?;
    objective.check(model)?;
    let mut jobs = Vec::with_capacity(clips.len() * cfg.eval_samples);
    for ci in 0..clips.len() {
        for k in 0..cfg.eval_samples {
            jobs.push((ci, k));
        }
    }
    let mut probs = vec![vec![0.0; n]; clips.len()];
    let mut loss_sum = 0.0;
    for chunk in jobs.chunks(cfg.batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|&(ci, k)| eval_sample(&clips[ci], cfg, k))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|&(ci, _)| clips[ci].label).collect();
        let mut g = Graph::inference();
        let x = g.constant(stack_samples(&samples)?);
        let out = model.forward_eval(&mut g, x)?;
        let (total, _) = objective.build(&mut g, &out.logits, &labels, &cfg.loss_weights)?;
        loss_sum += g.value(total).item() * chunk.len() as f64;
        let p = softmax_rows(g.value(out.logits[NUM_STACKS - 1]))?;
        for (row, &(ci, _)) in p.data().chunks(n).zip(chunk) {
            for (acc, v) in probs[ci].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    for p in probs.iter_mut() {
        for v in p.iter_mut() {
            *v /= cfg.eval_samples as f64;
        }
    }
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let mut e = summarize(&labels, probs, n)?;
    e.loss = if jobs.is_empty() { 0.0 } else { loss_sum / jobs.len() as f64 };
    Ok(e)
}

fn summarize(labels: &[usize], probabilities: Vec<Vec<f64>>, n: usize) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::zeros(n);
    let mut soft_confusion = ConfusionMatrix::zeros(n);
    let mut predictions = Vec::with_capacity(labels.len());
    let mut correct = 0usize;
    for (&y, p) in labels.iter().zip(&probabilities) {
        let pred = argmax(p);
        predictions.push(pred);
        correct += usize::from(pred == y);
        confusion.add(y, pred)?;
        soft_confusion.add_probabilities(y, p)?;
    }
    Ok(Evaluation {
        accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
        loss: 0.0,
        probabilities,
        predictions,
        confusion,
        soft_confusion,
    })
}

/// First index of the largest value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Final-head accuracy with `eval_samples` averaged samplings per clip.
pub fn evaluate(model: &Model, clips: &[Clip], cfg: &TrainConfig) -> Result<Evaluation> {
    evaluate_with(model, clips, &Objective::FinalHead, cfg)
}

/// Train `model` on `train` for `cfg.epochs` epochs, validating on `val`.
///
/// Batches are drawn from a per-epoch shuffle. Gradients of pruned filters
/// are zeroed before every update.
pub fn train(mut model: Model, train: &[Clip], val: &[Clip], objective: &Objective, cfg: &TrainConfig) -> Result<(Model, RunMetrics)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs clips in both splits, got {} train and {} validation",
            train.len(),
            val.len()
        )));
    }
    let n = model.config().num_classes();
    check_labels(train, n)?;
    objective.check(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut schedule = PlateauSchedule::new(cfg.learning_rate, cfg.lr_decay, cfg.patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut last_eval = None;
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut head_sums = [0.0; NUM_STACKS];
        let mut head_seen = [false; NUM_STACKS];
        for batch in order.chunks(cfg.batch_size) {
            let samples = batch
                .iter()
                .map(|&i| train_sample(&train[i], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new();
            let x = g.constant(stack_samples(&samples)?);
            let out = model.forward(&mut g, x, Mode::Train)?;
            let (total, heads) = objective.build(&mut g, &out.logits, &labels, &cfg.loss_weights)?;
            let value = g.value(total).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {value}"),
                });
            }
            loss_sum += value * batch.len() as f64;
            for (l, h) in heads.iter().enumerate() {
                if let Some(v) = h {
                    head_sums[l] += g.value(*v).item() * batch.len() as f64;
                    head_seen[l] = true;
                }
            }
            g.backward(total)?;
            let grads = model.parameter_grads(&g, &out);
            let mut params = model.parameters_mut();
            adam.step(&mut params, &grads, lr).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training { epoch, message },
                other => other,
            })?;
        }
        model.record_training(1);
        let eval = evaluate_with(&model, val, objective, cfg)?;
        let count = train.len() as f64;
        let mut head_losses = [None; NUM_STACKS];
        for l in 0..NUM_STACKS {
            if head_seen[l] {
                head_losses[l] = Some(head_sums[l] / count);
            }
        }
        if !eval.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("validation loss became {}", eval.loss),
            });
        }
        epochs.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / count,
            head_losses,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
        });
        schedule.observe(eval.loss);
        last_eval = Some(eval);
    }
    let eval = last_eval.expect("at least one epoch");
    Ok((
        model,
        RunMetrics {
            epochs,
            final_accuracy: eval.accuracy,
            confusion: eval.confusion,
            soft_confusion: eval.soft_confusion,
            rng: RngState {
                seed: cfg.seed,
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos(),
            },
        },
    ))
}

/// First pass: final-head cross-entropy only. The returned metrics carry the
/// validation confusion used to derive the hierarchy.
pub fn train_first_pass(model: Model, train_set: &[Clip], val: &[Clip], cfg: &TrainConfig) -> Result<(Model, RunMetrics)> {
    train(model, train_set, val, &Objective::FinalHead, cfg)
}

/// Second pass: weighted cross-entropy after every stack.
pub fn train_hierarchical(
    model: Model,
    train_set: &[Clip],
    val: &[Clip],
    hierarchy: &Hierarchy,
    cfg: &TrainConfig,
) -> Result<(Model, RunMetrics)> {
    train(model, train_set, val, &Objective::Hierarchical(hierarchy.clone()), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, StackConfig};
    use rand::Rng;

    #[test]
    fn adam_examples() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut adam = Adam::default();
        adam.step(&mut [&mut p], &[vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut adam = Adam::default();
        adam.step(&mut [&mut p], &[vec![0.5]], 0.1).unwrap();
        assert_eq!(p.data()[0], -0.09999999800000004);

        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut adam = Adam::default();
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.data()[0];
            adam.step(&mut [&mut p], &[vec![-3.0]], 0.01).unwrap();
            last = p.data()[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-6);
        assert!(matches!(
            adam.step(&mut [&mut p], &[vec![f64::NAN]], 0.01),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(&[1.0, 0.9, 0.8], 1e-4), 1e-4);
        assert_eq!(lr_schedule(&[1.0, 1.1, 1.2], 1e-4), 1e-5);
        assert_eq!(lr_schedule(&[1.0, 1.1, 0.9], 1e-4), 1e-4);
        assert_eq!(lr_schedule(&[1.0, 1.0, 1.0], 1e-4), 1e-5);
        let mut s = PlateauSchedule::new(1.0, 10.0, 2);
        let lrs: Vec<f64> = [1.0, 2.0, 2.0, 2.0, 2.0, 0.5].iter().map(|&l| s.observe(l)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.1, 0.1, 0.01, 0.01]);
    }

    #[test]
    fn split_examples() {
        let items: Vec<u32> = (0..100).collect();
        let (v, t) = split_validation(&items, 0.10, 3).unwrap();
        assert_eq!((v.len(), t.len()), (10, 90));
        assert_eq!(split_validation(&items, 0.10, 3).unwrap(), (v.clone(), t.clone()));
        let mut all: Vec<u32> = v.iter().chain(&t).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split_validation::<u32>(&[], 0.1, 0).is_err());
        assert!(split_validation(&items, 1.0, 0).is_err());
    }

    fn tiny_config() -> StackConfig {
        StackConfig {
            base_channels: 2,
            num_classes_per_head: [2, 2, 4, 4],
            ..StackConfig::default()
        }
    }

    fn toy_clips(count: usize, seed: u64) -> Vec<Clip> {
        // Class c is a bright square in quadrant c: linearly separable.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let label = i % 4;
                let (qy, qx) = (label / 2, label % 2);
                let frames = Tensor::from_fn(&[4, 1, 12, 12], |j| {
                    let (y, x) = ((j / 12) % 12, j % 12);
                    let inside = y / 6 == qy && x / 6 == qx;
                    f64::from(u8::from(inside)) + 0.1 * rng.random::<f64>()
                });
                Clip { id: i as u64, label, frames }
            })
            .collect()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            learning_rate: 0.01,
            batch_size: 4,
            crop_size: 10,
            frames_per_clip: 2,
            eval_samples: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_pass_learns_and_is_deterministic() {
        let clips = toy_clips(24, 1);
        let val = toy_clips(8, 2);
        let model = build_model(&tiny_config(), 0).unwrap();
        let (a, ma) = train_first_pass(model.clone(), &clips, &val, &toy_cfg()).unwrap();
        let (b, mb) = train_first_pass(model, &clips, &val, &toy_cfg()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.parameters(), b.parameters());
        assert!(ma.epochs.last().unwrap().train_loss < (4.0f64).ln());
        assert_eq!(ma.confusion.row_sums(), vec![2.0; 4]);
        assert!(ma.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert_eq!(a.trained_epochs(), 3);
        assert!(ma.epochs[0].head_losses[..3].iter().all(Option::is_none));
    }

    #[test]
    fn hierarchical_with_last_weight_only_matches_first_pass() {
        let clips = toy_clips(16, 3);
        let val = toy_clips(4, 4);
        let h = Hierarchy::new(
            4,
            vec![
                crate::hierarchy::Level { num_superclasses: 2, assignment: vec![0, 0, 1, 1] },
                crate::hierarchy::Level { num_superclasses: 2, assignment: vec![0, 1, 0, 1] },
                crate::hierarchy::Level { num_superclasses: 4, assignment: vec![0, 1, 2, 3] },
            ],
        )
        .unwrap();
        let cfg = TrainConfig {
            loss_weights: [0.0, 0.0, 0.0, 1.0],
            epochs: 2,
            ..toy_cfg()
        };
        let model = build_model(&tiny_config(), 5).unwrap();
        let (a, ma) = train_first_pass(model.clone(), &clips, &val, &cfg).unwrap();
        let (b, mb) = train_hierarchical(model.clone(), &clips, &val, &h, &cfg).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        for (x, y) in ma.epochs.iter().zip(&mb.epochs) {
            assert_eq!((x.train_loss, x.val_loss, x.val_accuracy), (y.train_loss, y.val_loss, y.val_accuracy));
        }

        let cfg = TrainConfig { loss_weights: [0.125, 0.25, 0.5, 1.0], ..cfg };
        let (_, m) = train_hierarchical(model, &clips, &val, &h, &cfg).unwrap();
        for e in &m.epochs {
            let manual: f64 = e.head_losses.iter().zip(cfg.loss_weights).map(|(l, w)| w * l.unwrap()).sum();
            assert!((manual - e.train_loss).abs() < 1e-10);
        }
    }

    #[test]
    fn evaluation_contract() {
        let clips = toy_clips(8, 9);
        let mut model = build_model(&tiny_config(), 1).unwrap();
        let cfg = toy_cfg();
        let before = model.clone();
        let e = evaluate(&model, &clips, &cfg).unwrap();
        assert_eq!(model, before);
        assert!(e.probabilities.iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-12));

        model.zero_heads();
        let e = evaluate(&model, &clips, &cfg).unwrap();
        assert!(e.probabilities.iter().all(|p| p.iter().all(|v| (v - 0.25).abs() < 1e-15)));
        assert_eq!(e.accuracy, 0.25);

        let one = TrainConfig { eval_samples: 1, ..cfg.clone() };
        let a = eval_sample(&clips[0], &one, 0).unwrap();
        assert_eq!(a, eval_sample(&clips[0], &cfg, 0).unwrap());
        assert_eq!(a.shape(), &[1, 2, 10, 10]);
    }

    #[test]
    fn one_hot_outputs_score_perfectly() {
        let labels = [2, 0, 1, 2];
        let probs: Vec<Vec<f64>> = labels.iter().map(|&y| (0..3).map(|c| f64::from(u8::from(c == y))).collect()).collect();
        let e = summarize(&labels, probs, 3).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.confusion, e.soft_confusion);
        assert_eq!(e.confusion.row_sums(), vec![1.0, 1.0, 2.0]);
    }
}
