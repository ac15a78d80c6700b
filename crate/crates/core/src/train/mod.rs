//! Optimisation loops.
//!
//! Every loop is batch size one and fully determined by its configuration and
//! seed: pair `i` of a pretraining stream, the data-fraction subset and each
//! epoch's visiting order all come from derived seeds.

mod adam;
pub mod experiments;
mod log;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use log::{epochs_to_threshold, CurveLog};

use crate::deform::{scaling_and_squaring, SsConfig};
use crate::error::{Error, Result};
use crate::io::{write_curves, Manifest};
use crate::losses::{
    pretrain_loss, registration_objective, LossWeights, NccConfig, RegistrationTarget, SimilarityKind,
};
use crate::metrics::{dice, foreground_labels};
use crate::net::{Checkpoint, ModelMode, RegistrationModel};
use crate::rng::{derive_seed, rng_from};
use crate::synth::{DownstreamDataset, PairConfig, PairStream, Subject};
use crate::volume::{warp_labels, FieldKind, LabelVolume, ScalarVolume, Shape3, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    /// Random pairs per epoch for streamed training.
    pub pairs_per_epoch: usize,
    /// Share of the downstream training split used by fine-tuning.
    pub data_fraction: f64,
    pub seed: u64,
    pub similarity: SimilarityKind,
    pub lambda: f64,
    /// KL weight; 0 disables self-distillation.
    pub eta: f64,
    /// Defaults to 4e-4 for pretraining and 1e-4 otherwise.
    pub lr: Option<f64>,
    pub ncc_window: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Random flip of both images along one random axis, half the time.
    pub flip: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            epochs: 10,
            pairs_per_epoch: 200,
            data_fraction: 1.0,
            seed: 0,
            similarity: SimilarityKind::Ncc,
            lambda: 1.0,
            eta: 1e-7,
            lr: None,
            ncc_window: 9,
            eval_every: 1,
            flip: false,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn for_phase(phase: Phase) -> Self {
        TrainConfig { phase, ..Self::default() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.phase {
            Phase::Pretrain => 4e-4,
            Phase::Finetune | Phase::Scratch => 1e-4,
        })
    }

    pub fn ncc(&self) -> NccConfig {
        NccConfig { window: self.ncc_window, ..NccConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.pairs_per_epoch == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("epochs, pairs_per_epoch and eval_every must be positive".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("data_fraction {} outside (0, 1]", self.data_fraction)));
        }
        if !(self.learning_rate() > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        LossWeights { lambda: self.lambda, eta: self.eta }.validate()?;
        self.ncc().validate()
    }

    /// Adds every field to `m` under a `train.` prefix.
    pub fn record(&self, m: &mut Manifest) {
        m.set("train.phase", format!("{:?}", self.phase).to_lowercase())
            .set("train.epochs", self.epochs)
            .set("train.pairs_per_epoch", self.pairs_per_epoch)
            .set("train.data_fraction", self.data_fraction)
            .set("train.seed", self.seed)
            .set("train.similarity", format!("{:?}", self.similarity).to_lowercase())
            .set("train.lambda", self.lambda)
            .set("train.eta", self.eta)
            .set("train.lr", self.learning_rate())
            .set("train.ncc_window", self.ncc_window)
            .set("train.eval_every", self.eval_every)
            .set("train.flip", self.flip)
            .set("train.batch_size", 1);
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: CurveLog,
    pub last: Checkpoint,
    /// Epoch, validation Dice and weights of the best validated epoch.
    pub best: Option<(u64, f64, Checkpoint)>,
}

/// Atlas and subjects scored by mean foreground Dice after warping the atlas
/// labels onto each subject.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub atlas: &'a Subject,
    pub subjects: &'a [Subject],
}

impl<'a> Validation<'a> {
    pub fn val(data: &'a DownstreamDataset) -> Self {
        Validation { atlas: &data.atlas, subjects: &data.val }
    }

    pub fn test(data: &'a DownstreamDataset) -> Self {
        Validation { atlas: &data.atlas, subjects: &data.test }
    }
}

fn weights(cfg: &TrainConfig) -> LossWeights {
    LossWeights { lambda: cfg.lambda, eta: cfg.eta }
}

fn target<'a>(
    cfg: &TrainConfig,
    fixed: &'a ScalarVolume,
    moving: &'a ScalarVolume,
    labels: Option<(&'a LabelVolume, &'a LabelVolume)>,
) -> RegistrationTarget<'a, f32> {
    RegistrationTarget { fixed, moving, labels, similarity: cfg.similarity, ncc: cfg.ncc() }
}

fn require_mode(model: &RegistrationModel, mode: ModelMode) -> Result<()> {
    if model.mode() != mode {
        return Err(Error::ConfigMismatch(format!("expected a {} model, got {}", mode.name(), model.mode().name())));
    }
    Ok(())
}

/// One pretraining step; returns the total loss before the update.
pub fn pretrain_step(
    model: &mut RegistrationModel,
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels: Option<(&LabelVolume, &LabelVolume)>,
    cfg: &TrainConfig,
    adam: &mut AdamState,
) -> Result<f64> {
    let ss = SsConfig::new(model.config().ss_steps)?;
    let out = model.forward_pretrain(fixed, moving)?;
    let loss = pretrain_loss(&out.ensemble, &out.stages_full, &target(cfg, fixed, moving, labels), &weights(cfg), ss)?;
    let grads = model.backward_pretrain(&loss.grad_ensemble, &loss.grad_stages)?;
    adam_step(model.params_mut().values_mut(), &grads, adam)?;
    Ok(loss.total)
}

/// One backbone step on the registration objective; returns the loss before
/// the update.
pub fn backbone_step(
    model: &mut RegistrationModel,
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels: Option<(&LabelVolume, &LabelVolume)>,
    cfg: &TrainConfig,
    adam: &mut AdamState,
) -> Result<f64> {
    let ss = SsConfig::new(model.config().ss_steps)?;
    let out = model.forward_backbone(fixed, moving)?;
    let eval = registration_objective(&out.velocity, &target(cfg, fixed, moving, labels), cfg.lambda, ss)?;
    let grads = model.backward_backbone(&eval.grad_velocity)?;
    adam_step(model.params_mut().values_mut(), &grads, adam)?;
    Ok(eval.value(cfg.lambda))
}

/// Mean foreground Dice between each subject's labels and the atlas labels
/// warped by the model's prediction.
pub fn evaluate(model: &mut RegistrationModel, v: Validation<'_>) -> Result<f64> {
    if v.subjects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = foreground_labels(v.atlas.labels.label_count());
    let mut total = 0.0;
    for s in v.subjects {
        let phi = predict(model, &s.image, &v.atlas.image)?;
        total += dice(&warp_labels(&v.atlas.labels, &phi)?, &s.labels, &labels)?.mean;
    }
    model.clear_record();
    Ok(total / v.subjects.len() as f64)
}

/// Mean foreground Dice with no registration at all.
pub fn identity_dice(v: Validation<'_>) -> Result<f64> {
    if v.subjects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = foreground_labels(v.atlas.labels.label_count());
    let mut total = 0.0;
    for s in v.subjects {
        total += dice(&v.atlas.labels, &s.labels, &labels)?.mean;
    }
    Ok(total / v.subjects.len() as f64)
}

/// The deformation a model predicts for `(fixed, moving)`.
pub fn predict(model: &mut RegistrationModel, fixed: &ScalarVolume, moving: &ScalarVolume) -> Result<VectorField> {
    Ok(match model.mode() {
        ModelMode::Pretrain => model.forward_pretrain(fixed, moving)?.phi,
        ModelMode::Backbone => model.forward_backbone(fixed, moving)?.phi,
    })
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    log: CurveLog,
    best: Option<(u64, f64, Checkpoint)>,
    step: u64,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Run { cfg, log: CurveLog::default(), best: None, step: 0 })
    }

    fn end_epoch(
        &mut self,
        model: &mut RegistrationModel,
        epoch: u64,
        losses: &[f64],
        started: Instant,
        validation: Option<Validation<'_>>,
    ) -> Result<()> {
        let n = losses.len().max(1) as f64;
        self.log.epoch_loss.push((epoch, losses.iter().sum::<f64>() / n));
        self.log.seconds_per_pair.push(started.elapsed().as_secs_f64() / n);
        if let Some(v) = validation {
            if epoch.is_multiple_of(self.cfg.eval_every as u64) || epoch == self.cfg.epochs as u64 {
                let d = evaluate(model, v)?;
                self.log.push_val(epoch, d)?;
                if self.best.as_ref().is_none_or(|b| d > b.1) {
                    let ck = checkpoint(model, self.cfg);
                    if let Some(dir) = &self.cfg.out_dir {
                        ck.save(&dir.join("best.ckpt"))?;
                    }
                    self.best = Some((epoch, d, ck));
                }
            }
        }
        if let Some(dir) = &self.cfg.out_dir {
            checkpoint(model, self.cfg).save(&dir.join("last.ckpt"))?;
            write_curves(&self.log, &dir.join("curves"))?;
        }
        Ok(())
    }

    fn finish(self, model: &RegistrationModel) -> Result<TrainOutcome> {
        let last = checkpoint(model, self.cfg);
        if let Some(dir) = &self.cfg.out_dir {
            write_manifest(dir, model, self.cfg)?;
        }
        Ok(TrainOutcome { log: self.log, last, best: self.best })
    }
}

fn checkpoint(model: &RegistrationModel, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint::from_model(model).with_seed("train", cfg.seed)
}

fn write_manifest(dir: &Path, model: &RegistrationModel, cfg: &TrainConfig) -> Result<()> {
    let mut m = Manifest::new();
    m.set("code_version", env!("CARGO_PKG_VERSION"));
    let c = model.config();
    m.set("model.mode", c.mode.name())
        .set("model.stages", c.stages)
        .set("model.base_channels", c.base_channels)
        .set("model.decoder_channels", c.decoder_channels)
        .set("model.ss_steps", c.ss_steps)
        .set("model.init_seed", model.seed());
    cfg.record(&mut m);
    m.write(&dir.join("manifest.txt"))
}

/// Minimises the pretraining objective on streamed random pairs.
pub fn pretrain(model: &mut RegistrationModel, pairs: &PairConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    require_mode(model, ModelMode::Pretrain)?;
    pairs.validate()?;
    if cfg.similarity == SimilarityKind::Dice && !pairs.emit_labels {
        return Err(Error::InvalidConfig("Dice pretraining needs emit_labels".into()));
    }
    let mut run = Run::new(cfg)?;
    let mut adam = AdamState::new(model.param_count(), cfg.learning_rate());
    let mut stream = PairStream::new(*pairs, cfg.seed)?.prefetch(2);
    for epoch in 1..=cfg.epochs as u64 {
        let started = Instant::now();
        let mut losses = Vec::with_capacity(cfg.pairs_per_epoch);
        for _ in 0..cfg.pairs_per_epoch {
            let p = stream.next().expect("endless stream");
            let labels = p.fixed_labels.as_ref().zip(p.moving_labels.as_ref());
            let loss = pretrain_step(model, &p.fixed, &p.moving, labels, cfg, &mut adam)?;
            run.log.push_loss(run.step, loss)?;
            run.step += 1;
            losses.push(loss);
        }
        run.end_epoch(model, epoch, &losses, started, None)?;
    }
    run.finish(model)
}

/// Trains a backbone on streamed random pairs only; `validation` is scored
/// but never trained on.
pub fn train_on_random_only(
    model: &mut RegistrationModel,
    pairs: &PairConfig,
    cfg: &TrainConfig,
    validation: Option<Validation<'_>>,
) -> Result<TrainOutcome> {
    require_mode(model, ModelMode::Backbone)?;
    pairs.validate()?;
    let mut run = Run::new(cfg)?;
    let mut adam = AdamState::new(model.param_count(), cfg.learning_rate());
    let mut stream = PairStream::new(*pairs, cfg.seed)?.prefetch(2);
    for epoch in 1..=cfg.epochs as u64 {
        let started = Instant::now();
        let mut losses = Vec::with_capacity(cfg.pairs_per_epoch);
        for _ in 0..cfg.pairs_per_epoch {
            let p = stream.next().expect("endless stream");
            let labels = p.fixed_labels.as_ref().zip(p.moving_labels.as_ref());
            let loss = backbone_step(model, &p.fixed, &p.moving, labels, cfg, &mut adam)?;
            run.log.push_loss(run.step, loss)?;
            run.step += 1;
            losses.push(loss);
        }
        run.end_epoch(model, epoch, &losses, started, validation)?;
    }
    run.finish(model)
}

/// Deterministic subset of `0..n`: the first `ceil(fraction * n)` entries of
/// a seed-shuffled index list.
pub fn select_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("data_fraction {fraction} outside (0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(derive_seed(seed, 0xDA7A)));
    let keep = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    idx.truncate(keep);
    Ok(idx)
}

/// Atlas-to-subject fine-tuning of a backbone on the downstream training
/// split. A scratch run is the same call on a freshly initialised model.
pub fn finetune(model: &mut RegistrationModel, data: &DownstreamDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    require_mode(model, ModelMode::Backbone)?;
    let chosen = select_fraction(data.train.len(), cfg.data_fraction, cfg.seed)?;
    let mut run = Run::new(cfg)?;
    let mut adam = AdamState::new(model.param_count(), cfg.learning_rate());
    let validation = (!data.val.is_empty()).then(|| Validation::val(data));
    let atlas = &data.atlas;
    for epoch in 1..=cfg.epochs as u64 {
        let started = Instant::now();
        let mut order = chosen.clone();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, epoch)));
        let mut losses = Vec::with_capacity(order.len());
        for &i in &order {
            let s = &data.train[i];
            let loss = if cfg.flip {
                let mut rng = rng_from(derive_seed(cfg.seed ^ 0xF11F, run.step));
                if rng.random::<bool>() {
                    let axis = rng.random_range(0..3);
                    let (f, m) = (flip_scalar(&s.image, axis), flip_scalar(&atlas.image, axis));
                    let (fl, ml) = (flip_labels(&s.labels, axis), flip_labels(&atlas.labels, axis));
                    backbone_step(model, &f, &m, Some((&fl, &ml)), cfg, &mut adam)?
                } else {
                    backbone_step(model, &s.image, &atlas.image, Some((&s.labels, &atlas.labels)), cfg, &mut adam)?
                }
            } else {
                backbone_step(model, &s.image, &atlas.image, Some((&s.labels, &atlas.labels)), cfg, &mut adam)?
            };
            run.log.push_loss(run.step, loss)?;
            run.step += 1;
            losses.push(loss);
        }
        run.end_epoch(model, epoch, &losses, started, validation)?;
    }
    run.finish(model)
}

fn flip_index(shape: Shape3, axis: usize) -> impl Fn([usize; 3]) -> usize {
    let d = shape.dims();
    move |mut c| {
        c[axis] = d[axis] - 1 - c[axis];
        shape.index(c[0], c[1], c[2])
    }
}

fn flip_scalar(v: &ScalarVolume, axis: usize) -> ScalarVolume {
    let src = flip_index(v.shape(), axis);
    let data = v.data();
    ScalarVolume::from_fn(v.shape(), |c| data[src(c)]).with_spacing(v.spacing)
}

fn flip_labels(v: &LabelVolume, axis: usize) -> LabelVolume {
    let src = flip_index(v.shape(), axis);
    let data: Vec<u16> = v.shape().iter().map(|c| v.data()[src(c)]).collect();
    LabelVolume::from_vec(v.shape(), data, v.label_count()).expect("same labels").with_spacing(v.spacing)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda: f64,
    pub ncc_window: usize,
    pub ss_steps: u32,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig { iterations: 100, lr: 0.05, lambda: 1.0, ncc_window: 9, ss_steps: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub velocity: VectorField,
    pub phi: VectorField,
    /// Objective before each update, then after the last one.
    pub losses: Vec<f64>,
}

/// Optimises a velocity field directly for one pair with Adam, starting from
/// `init` or zero.
pub fn instance_optimize(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    cfg: &InstanceConfig,
    init: Option<&VectorField>,
) -> Result<InstanceResult> {
    fixed.shape().ensure_same(&moving.shape())?;
    let ss = SsConfig::new(cfg.ss_steps)?;
    let ncc = NccConfig { window: cfg.ncc_window, ..NccConfig::default() };
    ncc.validate()?;
    let target = RegistrationTarget::ncc(fixed, moving, ncc);
    let mut v = match init {
        Some(v0) => {
            v0.shape().ensure_same(&fixed.shape())?;
            v0.clone().with_kind(FieldKind::Velocity)
        }
        None => VectorField::zeros(fixed.shape(), FieldKind::Velocity),
    };
    let mut adam = AdamState::new(v.data().len(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let eval = registration_objective(&v, &target, cfg.lambda, ss)?;
        losses.push(eval.value(cfg.lambda));
        adam_step(v.data_mut(), &eval.grad_velocity, &mut adam)?;
    }
    let last = registration_objective(&v, &target, cfg.lambda, ss)?;
    losses.push(last.value(cfg.lambda));
    let phi = scaling_and_squaring(&v, ss);
    Ok(InstanceResult { velocity: v, phi, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTiming {
    /// Median wall-clock seconds per pair.
    pub median: f64,
    pub samples: Vec<f64>,
}

impl StepTiming {
    pub fn std(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        (self.samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Times full training steps (forward, loss, backward, update) of `model` on
/// one random pair of `shape`, after two warm-up steps. At least 20 steps
/// are measured.
pub fn step_timer(model: &mut RegistrationModel, shape: Shape3, steps: usize, seed: u64) -> Result<StepTiming> {
    let pairs = PairConfig { shape, ..PairConfig::default() };
    let p = PairStream::new(pairs, seed)?.pair_at(0);
    let cfg = TrainConfig { phase: Phase::Pretrain, ncc_window: 9, ..TrainConfig::default() };
    let mut adam = AdamState::new(model.param_count(), cfg.learning_rate());
    let mut step = |model: &mut RegistrationModel| -> Result<()> {
        match model.mode() {
            ModelMode::Pretrain => pretrain_step(model, &p.fixed, &p.moving, None, &cfg, &mut adam)?,
            ModelMode::Backbone => backbone_step(model, &p.fixed, &p.moving, None, &cfg, &mut adam)?,
        };
        Ok(())
    };
    for _ in 0..2 {
        step(model)?;
    }
    let mut samples = Vec::with_capacity(steps.max(20));
    for _ in 0..steps.max(20) {
        let t = Instant::now();
        step(model)?;
        samples.push(t.elapsed().as_secs_f64());
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(StepTiming { median, samples })
}
