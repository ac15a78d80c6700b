//! Desk-scale experiment matrix: the KL ablation, pretrained versus scratch
//! transfer, training on random pairs only, and per-step cost.

use serde::{Deserialize, Serialize};

use super::{
    epochs_to_threshold, evaluate, finetune, identity_dice, pretrain, step_timer, train_on_random_only, CurveLog,
    Phase, StepTiming, TrainConfig, Validation,
};
use crate::error::{Error, Result};
use crate::io::moving_average;
use crate::net::{ModelConfig, ModelMode, RegistrationModel};
use crate::rng::derive_seed;
use crate::synth::{DownstreamConfig, DownstreamDataset, PairConfig};
use crate::volume::Shape3;

/// Smoothing window of the epochs-to-threshold statistic.
pub const THRESHOLD_WINDOW: usize = 5;
/// Share of the scratch run's final smoothed Dice that counts as converged.
pub const THRESHOLD_SHARE: f64 = 0.95;

/// Learning rate of the desk presets. Runs are two to three orders of
/// magnitude shorter than the paper-scale schedules.
pub const DESK_LR: f64 = 1e-3;

/// Everything one desk experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskPreset {
    pub pairs: PairConfig,
    pub model: ModelConfig,
    pub downstream: DownstreamConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Seeds of the independent pretrain / fine-tune repetitions.
    pub seeds: Vec<u64>,
    /// Data fraction of the low-data regime.
    pub low_fraction: f64,
}

impl Default for DeskPreset {
    fn default() -> Self {
        Self::kl_ablation()
    }
}

impl DeskPreset {
    /// 32³ inputs, four stages.
    pub fn kl_ablation() -> Self {
        let shape = Shape3::cube(32).expect("valid");
        DeskPreset {
            pairs: PairConfig::default().with_shape(shape),
            model: ModelConfig::default(),
            downstream: DownstreamConfig { shape, ..DownstreamConfig::default() },
            pretrain: TrainConfig {
                phase: Phase::Pretrain,
                epochs: 6,
                pairs_per_epoch: 40,
                lr: Some(DESK_LR),
                ncc_window: 5,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                phase: Phase::Finetune,
                epochs: 20,
                lr: Some(DESK_LR),
                ncc_window: 5,
                ..TrainConfig::default()
            },
            seeds: vec![11],
            low_fraction: 0.1,
        }
    }

    /// 16³ inputs, three stages.
    pub fn transfer() -> Self {
        let shape = Shape3::cube(16).expect("valid");
        DeskPreset {
            pairs: PairConfig { svf_amplitude: 2.0, svf_frequency: 3, label_frequency: 3, ..PairConfig::default() }
                .with_shape(shape),
            model: ModelConfig { stages: 3, ..ModelConfig::default() },
            downstream: DownstreamConfig { shape, deform_amplitude: 3.0, ..DownstreamConfig::default() },
            pretrain: TrainConfig {
                phase: Phase::Pretrain,
                epochs: 20,
                pairs_per_epoch: 100,
                lr: Some(DESK_LR),
                ncc_window: 5,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                phase: Phase::Finetune,
                epochs: 20,
                lr: Some(DESK_LR),
                ncc_window: 5,
                ..TrainConfig::default()
            },
            seeds: vec![1, 2, 3],
            low_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pairs.validate()?;
        self.model.validate()?;
        self.model.check_input(self.pairs.shape)?;
        self.model.check_input(self.downstream.shape)?;
        self.downstream.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if !(self.low_fraction > 0.0 && self.low_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("low_fraction {} outside (0, 1]", self.low_fraction)));
        }
        Ok(())
    }

    fn pretrain_model(&self, seed: u64) -> Result<RegistrationModel> {
        RegistrationModel::new(self.model.with_mode(ModelMode::Pretrain), derive_seed(seed, 1))
    }

    fn backbone_model(&self, seed: u64) -> Result<RegistrationModel> {
        RegistrationModel::new(self.model.with_mode(ModelMode::Backbone), derive_seed(seed, 2))
    }
}

/// Slope of the least-squares line through `y` against its index.
pub fn trend(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Paired pretraining runs that differ only in the KL weight.
#[derive(Debug, Clone)]
pub struct KlAblation {
    pub eta: f64,
    pub with_kl: CurveLog,
    pub without_kl: CurveLog,
    pub seconds: f64,
}

impl KlAblation {
    /// Both runs lose loss epoch over epoch on average (negative trend).
    pub fn decreasing(&self) -> bool {
        trend(&self.with_kl.epoch_losses()) < 0.0 && trend(&self.without_kl.epoch_losses()) < 0.0
    }

    pub fn final_losses(&self) -> (f64, f64) {
        let last = |l: &CurveLog| l.epoch_losses().last().copied().unwrap_or(f64::NAN);
        (last(&self.with_kl), last(&self.without_kl))
    }

    pub fn kl_lower(&self) -> bool {
        let (w, wo) = self.final_losses();
        w < wo
    }
}

/// Pretrains twice from the same initial weights on the same pair stream,
/// once with the preset's KL weight and once with it set to zero.
pub fn kl_ablation(preset: &DeskPreset) -> Result<KlAblation> {
    preset.validate()?;
    let started = std::time::Instant::now();
    let seed = preset.seeds[0];
    let cfg = TrainConfig { seed, ..preset.pretrain.clone() };
    let mut with = preset.pretrain_model(seed)?;
    let with_kl = pretrain(&mut with, &preset.pairs, &cfg)?.log;
    let mut without = preset.pretrain_model(seed)?;
    let without_kl = pretrain(&mut without, &preset.pairs, &TrainConfig { eta: 0.0, ..cfg.clone() })?.log;
    Ok(KlAblation { eta: cfg.eta, with_kl, without_kl, seconds: started.elapsed().as_secs_f64() })
}

/// One seed of the transfer study.
#[derive(Debug, Clone)]
pub struct TransferRun {
    pub seed: u64,
    pub pretrain: CurveLog,
    pub pretrained: CurveLog,
    pub scratch: CurveLog,
    pub pretrained_test: f64,
    pub scratch_test: f64,
    pub pretrained_low_test: f64,
    pub scratch_low_test: f64,
}

impl TransferRun {
    /// Smoothed-Dice threshold derived from the scratch run.
    pub fn threshold(&self) -> f64 {
        let smooth = moving_average(&self.scratch.val_dice(), THRESHOLD_WINDOW);
        THRESHOLD_SHARE * smooth.last().copied().unwrap_or(f64::NAN)
    }

    /// Epochs to threshold for `(pretrained, scratch)`. A run that never
    /// crosses counts as one epoch past the end.
    pub fn epochs_to_threshold(&self) -> (usize, usize) {
        let t = self.threshold();
        let count = |l: &CurveLog| {
            let v = l.val_dice();
            epochs_to_threshold(&v, t, THRESHOLD_WINDOW).unwrap_or(v.len() + 1)
        };
        (count(&self.pretrained), count(&self.scratch))
    }
}

#[derive(Debug, Clone)]
pub struct TransferStudy {
    pub runs: Vec<TransferRun>,
    pub seconds: f64,
}

impl TransferStudy {
    /// Seed-averaged fine-tuning loss per epoch, `(pretrained, scratch)`.
    pub fn mean_epoch_losses(&self) -> (Vec<f64>, Vec<f64>) {
        let mean = |f: &dyn Fn(&TransferRun) -> Vec<f64>| {
            let cols: Vec<Vec<f64>> = self.runs.iter().map(f).collect();
            let n = cols.iter().map(Vec::len).min().unwrap_or(0);
            (0..n).map(|e| cols.iter().map(|c| c[e]).sum::<f64>() / cols.len() as f64).collect::<Vec<_>>()
        };
        (mean(&|r| r.pretrained.epoch_losses()), mean(&|r| r.scratch.epoch_losses()))
    }

    /// Pretrained loss is below scratch at every epoch after the second.
    pub fn lower_loss_after_epoch_two(&self) -> bool {
        let (p, s) = self.mean_epoch_losses();
        p.len() > 2 && p.iter().zip(&s).skip(2).all(|(a, b)| a < b)
    }

    /// Seed-averaged epochs to threshold, `(pretrained, scratch)`.
    pub fn mean_epochs_to_threshold(&self) -> (f64, f64) {
        let n = self.runs.len() as f64;
        let (mut p, mut s) = (0.0, 0.0);
        for r in &self.runs {
            let (a, b) = r.epochs_to_threshold();
            p += a as f64;
            s += b as f64;
        }
        (p / n, s / n)
    }

    pub fn speedup_holds(&self) -> bool {
        let (p, s) = self.mean_epochs_to_threshold();
        p <= 0.7 * s
    }

    /// Mean test Dice of the low-data regime, `(pretrained, scratch)`.
    pub fn low_data_dice(&self) -> (f64, f64) {
        let n = self.runs.len() as f64;
        let p = self.runs.iter().map(|r| r.pretrained_low_test).sum::<f64>() / n;
        let s = self.runs.iter().map(|r| r.scratch_low_test).sum::<f64>() / n;
        (p, s)
    }

    pub fn full_data_dice(&self) -> (f64, f64) {
        let n = self.runs.len() as f64;
        let p = self.runs.iter().map(|r| r.pretrained_test).sum::<f64>() / n;
        let s = self.runs.iter().map(|r| r.scratch_test).sum::<f64>() / n;
        (p, s)
    }
}

/// For every seed: pretrain, then fine-tune a backbone with and without the
/// pretrained encoder on all and on a fraction of the downstream data. Both
/// arms of a seed share the backbone initialisation and the data order.
pub fn transfer_study(preset: &DeskPreset) -> Result<TransferStudy> {
    preset.validate()?;
    let started = std::time::Instant::now();
    let data = DownstreamDataset::generate(&preset.downstream)?;
    let test = Validation::test(&data);
    let mut runs = Vec::with_capacity(preset.seeds.len());
    for &seed in &preset.seeds {
        let mut pre = preset.pretrain_model(seed)?;
        let pretrain_log = pretrain(&mut pre, &preset.pairs, &TrainConfig { seed, ..preset.pretrain.clone() })?.log;

        let arm = |transfer: bool, fraction: f64| -> Result<(CurveLog, f64)> {
            let mut model = preset.backbone_model(seed)?;
            if transfer {
                model.transfer_encoder_from(&pre)?;
            }
            let phase = if transfer { Phase::Finetune } else { Phase::Scratch };
            let cfg = TrainConfig { phase, seed, data_fraction: fraction, ..preset.finetune.clone() };
            let log = finetune(&mut model, &data, &cfg)?.log;
            Ok((log, evaluate(&mut model, test)?))
        };
        let (pretrained, pretrained_test) = arm(true, 1.0)?;
        let (scratch, scratch_test) = arm(false, 1.0)?;
        let (_, pretrained_low_test) = arm(true, preset.low_fraction)?;
        let (_, scratch_low_test) = arm(false, preset.low_fraction)?;
        runs.push(TransferRun {
            seed,
            pretrain: pretrain_log,
            pretrained,
            scratch,
            pretrained_test,
            scratch_test,
            pretrained_low_test,
            scratch_low_test,
        });
    }
    Ok(TransferStudy { runs, seconds: started.elapsed().as_secs_f64() })
}

/// Test Dice of no registration, of a backbone trained on random pairs only
/// and of the same backbone fine-tuned on the downstream data afterwards.
#[derive(Debug, Clone)]
pub struct RandomOnlyStudy {
    pub identity: f64,
    pub zero_shot: f64,
    pub finetuned: f64,
    pub random_log: CurveLog,
    pub seconds: f64,
}

impl RandomOnlyStudy {
    pub fn ordered(&self) -> bool {
        self.identity < self.zero_shot && self.zero_shot < self.finetuned
    }
}

/// Trains a backbone on the preset's random pairs for the pretraining budget,
/// scores it zero-shot on the downstream test split, then fine-tunes it.
pub fn random_only_study(preset: &DeskPreset) -> Result<RandomOnlyStudy> {
    preset.validate()?;
    let started = std::time::Instant::now();
    let data = DownstreamDataset::generate(&preset.downstream)?;
    let test = Validation::test(&data);
    let seed = preset.seeds[0];
    let mut model = preset.backbone_model(seed)?;
    let cfg = TrainConfig { phase: Phase::Scratch, seed, ..preset.pretrain.clone() };
    let random_log = train_on_random_only(&mut model, &preset.pairs, &cfg, None)?.log;
    let zero_shot = evaluate(&mut model, test)?;
    let ft = TrainConfig { phase: Phase::Finetune, seed, ..preset.finetune.clone() };
    finetune(&mut model, &data, &ft)?;
    let finetuned = evaluate(&mut model, test)?;
    Ok(RandomOnlyStudy {
        identity: identity_dice(test)?,
        zero_shot,
        finetuned,
        random_log,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct CostRatio {
    pub pretrain: StepTiming,
    pub backbone: StepTiming,
}

impl CostRatio {
    pub fn ratio(&self) -> f64 {
        self.pretrain.median / self.backbone.median
    }
}

/// Times training steps of both model modes at the same input size. The
/// measurements alternate in blocks so drift in machine load hits both.
pub fn cost_ratio(model: &ModelConfig, shape: Shape3, steps: usize, seed: u64) -> Result<CostRatio> {
    model.check_input(shape)?;
    let mut pre = RegistrationModel::new(model.with_mode(ModelMode::Pretrain), seed)?;
    let mut back = RegistrationModel::new(model.with_mode(ModelMode::Backbone), seed)?;
    let blocks = 2;
    let per = steps.div_ceil(blocks).max(20);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..blocks {
        a.extend(step_timer(&mut pre, shape, per, seed)?.samples);
        b.extend(step_timer(&mut back, shape, per, seed)?.samples);
    }
    Ok(CostRatio { pretrain: timing(a), backbone: timing(b) })
}

fn timing(samples: Vec<f64>) -> StepTiming {
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    StepTiming { median: sorted[sorted.len() / 2], samples }
}
