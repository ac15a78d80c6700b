use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, ValueEnum};
use randreg_core::io::{
    read_landmarks, read_loss_csv, read_nifti1, read_rvol, read_val_csv, write_atomic, write_curves, write_curves_svg,
    write_nifti1, write_rvol, Manifest, Rvol,
};
use randreg_core::metrics::{dice, foreground_labels, ndv_percent, tre, NdvMode};
use randreg_core::net::{Checkpoint, ModelMode, RegistrationModel};
use randreg_core::selftest::{run_suite, Suite};
use randreg_core::synth::{DownstreamDataset, PairStream, Subject};
use randreg_core::train::experiments::{self, DeskPreset};
use randreg_core::train::{self, instance_optimize, predict, CurveLog, Phase};
use randreg_core::volume::{warp_labels, warp_scalar, LabelVolume, ScalarVolume, Shape3};

use crate::config::{load_preset, RunConfig};
use crate::Common;

/// Bad flags or configuration; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), &common.overrides, common.seed).map_err(|e| usage(format!("{e:#}")))
}

fn dump_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn is_nifti(path: &Path) -> bool {
    path.to_string_lossy().ends_with(".nii")
}

pub fn read_scalar(path: &Path) -> Result<ScalarVolume> {
    Ok(if is_nifti(path) { read_nifti1(path)?.into_scalar() } else { read_rvol(path)?.into_scalar(path)? })
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    Ok(if is_nifti(path) { read_nifti1(path)?.into_labels(None)? } else { read_rvol(path)?.into_labels(path)? })
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of random pairs.
    #[arg(long, default_value_t = 1)]
    pub pairs: usize,
    /// Cube side; overrides `pairs.shape` / `downstream.shape`.
    #[arg(long)]
    pub shape: Option<usize>,
    /// Write the downstream dataset instead of random pairs.
    #[arg(long)]
    pub downstream: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn gen(a: GenArgs) -> Result<bool> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.shape {
        let s = Shape3::cube(n).map_err(|e| usage(e.to_string()))?;
        cfg.pairs.shape = s;
        cfg.downstream.shape = s;
    }
    std::fs::create_dir_all(&a.out)?;
    if a.downstream {
        if let Some(s) = a.common.seed {
            cfg.downstream.seed = s;
        }
        let data = DownstreamDataset::generate(&cfg.downstream)?;
        let put = |name: String, s: &Subject| -> Result<()> {
            write_rvol(&a.out.join(format!("{name}.rvol")), &Rvol::Scalar(s.image.clone()))?;
            write_rvol(&a.out.join(format!("{name}_labels.rvol")), &Rvol::Labels(s.labels.clone()))?;
            Ok(())
        };
        put("atlas".into(), &data.atlas)?;
        for (split, set) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
            for (i, s) in set.iter().enumerate() {
                put(format!("{split}_{i:03}"), s)?;
            }
        }
        println!(
            "wrote atlas + {}/{}/{} subjects to {}",
            data.train.len(),
            data.val.len(),
            data.test.len(),
            a.out.display()
        );
    } else {
        let stream = PairStream::new(cfg.pairs, cfg.seed)?;
        for i in 0..a.pairs {
            let p = stream.pair_at(i as u64);
            let base = a.out.join(format!("pair_{i:04}"));
            let path = |s: &str| PathBuf::from(format!("{}_{s}.rvol", base.display()));
            write_rvol(&path("fixed"), &Rvol::Scalar(p.fixed))?;
            write_rvol(&path("moving"), &Rvol::Scalar(p.moving))?;
            write_rvol(&path("phi_fixed"), &Rvol::Field(p.phi_to_fixed))?;
            write_rvol(&path("phi_moving"), &Rvol::Field(p.phi_to_moving))?;
            if let (Some(f), Some(m)) = (p.fixed_labels, p.moving_labels) {
                write_rvol(&path("fixed_labels"), &Rvol::Labels(f))?;
                write_rvol(&path("moving_labels"), &Rvol::Labels(m))?;
            }
        }
        println!("wrote {} pairs to {}", a.pairs, a.out.display());
    }
    dump_config(&cfg, &a.out)?;
    Ok(true)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

fn summarise(log: &CurveLog) {
    for (e, l) in &log.epoch_loss {
        let dice = log.val.iter().find(|v| v.0 == *e).map(|v| format!("  val_dice {:.4}", v.1)).unwrap_or_default();
        println!("epoch {e:>3}  loss {l:.6}{dice}");
    }
}

pub fn pretrain(a: TrainArgs) -> Result<bool> {
    let mut cfg = load_config(&a.common)?;
    cfg.model.mode = ModelMode::Pretrain;
    cfg.train.phase = Phase::Pretrain;
    cfg.train.out_dir = Some(a.out.clone());
    std::fs::create_dir_all(&a.out)?;
    dump_config(&cfg, &a.out)?;
    let mut model = RegistrationModel::new(cfg.model, cfg.seed)?;
    let outcome = train::pretrain(&mut model, &cfg.pairs, &cfg.train)?;
    summarise(&outcome.log);
    Ok(true)
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained (encoder transfer) or backbone (resume) checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn finetune(a: FinetuneArgs) -> Result<bool> {
    let mut cfg = load_config(&a.common)?;
    cfg.model.mode = ModelMode::Backbone;
    cfg.train.out_dir = Some(a.out.clone());
    let mut model = match &a.init {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            match ck.config.mode {
                ModelMode::Pretrain => {
                    let mut m = RegistrationModel::new(ck.config.with_mode(ModelMode::Backbone), cfg.seed)?;
                    ck.transfer_encoder(&mut m)?;
                    m
                }
                ModelMode::Backbone => ck.to_model()?,
            }
        }
        None => RegistrationModel::new(cfg.model, cfg.seed)?,
    };
    cfg.model = *model.config();
    cfg.train.phase = if a.init.is_some() { Phase::Finetune } else { Phase::Scratch };
    std::fs::create_dir_all(&a.out)?;
    dump_config(&cfg, &a.out)?;
    let data = DownstreamDataset::generate(&cfg.downstream)?;
    let outcome = train::finetune(&mut model, &data, &cfg.train)?;
    summarise(&outcome.log);
    let test = train::evaluate(&mut model, train::Validation::test(&data))?;
    println!("test_dice {test:.6}");
    Ok(true)
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Model checkpoint; without one the velocity is optimised directly.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Refine the model's prediction by instance optimisation.
    #[arg(long)]
    pub refine: bool,
    /// Output deformation (RVOL).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the warped moving image (RVOL, or NIfTI for `.nii`).
    #[arg(long)]
    pub warped: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn register(a: RegisterArgs) -> Result<bool> {
    let cfg = load_config(&a.common)?;
    let fixed = read_scalar(&a.fixed)?;
    let moving = read_scalar(&a.moving)?;
    let phi = match &a.ckpt {
        Some(path) => {
            let mut model: RegistrationModel = Checkpoint::load(path)?.to_model()?;
            let phi = predict(&mut model, &fixed, &moving)?;
            if a.refine {
                let init = match model.mode() {
                    ModelMode::Pretrain => model.forward_pretrain(&fixed, &moving)?.ensemble.mean,
                    ModelMode::Backbone => model.forward_backbone(&fixed, &moving)?.velocity,
                };
                instance_optimize(&fixed, &moving, &cfg.instance, Some(&init))?.phi
            } else {
                phi
            }
        }
        None => {
            let r = instance_optimize(&fixed, &moving, &cfg.instance, None)?;
            println!("instance loss {:.6} -> {:.6}", r.losses[0], r.losses[r.losses.len() - 1]);
            r.phi
        }
    };
    write_rvol(&a.out, &Rvol::Field(phi.clone()))?;
    if let Some(w) = &a.warped {
        let warped = warp_scalar(&moving, &phi)?;
        if is_nifti(w) {
            write_nifti1(w, &warped)?;
        } else {
            write_rvol(w, &Rvol::Scalar(warped))?;
        }
    }
    let dump = PathBuf::from(format!("{}.config.toml", a.out.display()));
    write_atomic(&dump, cfg.to_toml()?.as_bytes())?;
    println!("ndv_percent {:.4}", ndv_percent(&phi, NdvMode::Fractional)?);
    Ok(true)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Deformation mapping fixed-grid points into the moving image.
    #[arg(long)]
    pub phi: PathBuf,
    #[arg(long, requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
    #[arg(long, requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
    #[arg(long, requires = "moving_landmarks")]
    pub fixed_landmarks: Option<PathBuf>,
    #[arg(long, requires = "fixed_landmarks")]
    pub moving_landmarks: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = NdvArg::Fractional)]
    pub ndv: NdvArg,
    /// Also write the metrics as a key-value file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NdvArg {
    Fractional,
    Counting,
    Central,
}

pub fn eval(a: EvalArgs) -> Result<bool> {
    let phi = read_rvol(&a.phi)?.into_field(&a.phi)?;
    let mode = match a.ndv {
        NdvArg::Fractional => NdvMode::Fractional,
        NdvArg::Counting => NdvMode::Counting,
        NdvArg::Central => NdvMode::Central,
    };
    let mut m = Manifest::new();
    m.set("ndv_percent", ndv_percent(&phi, mode)?);
    if let (Some(f), Some(mv)) = (&a.fixed_labels, &a.moving_labels) {
        let (fixed, moving) = (read_labels(f)?, read_labels(mv)?);
        let warped = warp_labels(&moving, &phi)?;
        let report = dice(&warped, &fixed, &foreground_labels(moving.label_count().max(fixed.label_count())))?;
        m.set("dice_mean", report.mean);
        for (l, d) in report.labels.iter().zip(&report.per_label) {
            m.set(format!("dice_label_{l}"), d);
        }
    }
    if let (Some(f), Some(mv)) = (&a.fixed_landmarks, &a.moving_landmarks) {
        let r = tre(&read_landmarks(mv)?, &read_landmarks(f)?, &phi)?;
        m.set("tre_mean_mm", r.mean).set("tre_std_mm", r.std);
    }
    print!("{}", m.to_text());
    if let Some(out) = &a.out {
        m.write(out)?;
    }
    Ok(true)
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// Stem of `<stem>_loss.csv` and `<stem>_val.csv`.
    #[arg(long)]
    pub log: PathBuf,
    /// Output SVG.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
}

fn stem_file(stem: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", stem.display()))
}

pub fn curves(a: CurvesArgs) -> Result<bool> {
    if a.window == 0 {
        return Err(usage("--window must be positive"));
    }
    let loss_path = stem_file(&a.log, "_loss.csv");
    let val_path = stem_file(&a.log, "_val.csv");
    let mut log = CurveLog { train: read_loss_csv(&loss_path)?, ..CurveLog::default() };
    if val_path.exists() {
        log.val = read_val_csv(&val_path)?;
    }
    let paths = write_curves_svg(&log, &a.out, a.window)?;
    println!("wrote {}", paths.svg.unwrap_or(a.out).display());
    Ok(true)
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Run only these suites (gradients, diffeomorphism, loss-oracles,
    /// scaling-squaring).
    #[arg(long = "suite")]
    pub suites: Vec<String>,
}

pub fn selftest(a: SelftestArgs) -> Result<bool> {
    let suites: Vec<Suite> = if a.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suites
            .iter()
            .map(|s| Suite::parse(s).ok_or_else(|| usage(format!("unknown suite {s:?}"))))
            .collect::<Result<_>>()?
    };
    let mut all = true;
    for s in suites {
        let r = run_suite(s)?;
        print!("{r}");
        all &= r.passed();
    }
    println!("{}", if all { "selftest passed" } else { "selftest FAILED" });
    Ok(all)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Experiment {
    Kl,
    Transfer,
    RandomOnly,
    Cost,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub which: Experiment,
    /// Directory for curves and the summary.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn experiment(a: ExperimentArgs) -> Result<bool> {
    let base = match a.which {
        Experiment::Kl | Experiment::Cost => DeskPreset::kl_ablation(),
        Experiment::Transfer | Experiment::RandomOnly => DeskPreset::transfer(),
    };
    let mut preset =
        load_preset(base, a.common.config.as_deref(), &a.common.overrides).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(s) = a.common.seed {
        preset.seeds = vec![s];
    }
    std::fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("config.toml"), toml::to_string(&preset)?.as_bytes())?;
    let mut m = Manifest::new();
    match a.which {
        Experiment::Kl => {
            let r = experiments::kl_ablation(&preset)?;
            write_curves(&r.with_kl, &a.out.join("with_kl"))?;
            write_curves(&r.without_kl, &a.out.join("without_kl"))?;
            let (w, wo) = r.final_losses();
            m.set("final_loss_with_kl", w).set("final_loss_without_kl", wo).set("decreasing", r.decreasing());
        }
        Experiment::Transfer => {
            let r = experiments::transfer_study(&preset)?;
            for run in &r.runs {
                write_curves(&run.pretrained, &a.out.join(format!("pretrained_{}", run.seed)))?;
                write_curves(&run.scratch, &a.out.join(format!("scratch_{}", run.seed)))?;
            }
            let (p, s) = r.mean_epochs_to_threshold();
            let (lp, ls) = r.low_data_dice();
            let (fp, fs) = r.full_data_dice();
            m.set("epochs_to_threshold_pretrained", p)
                .set("epochs_to_threshold_scratch", s)
                .set("lower_loss_after_epoch_2", r.lower_loss_after_epoch_two())
                .set("test_dice_pretrained", fp)
                .set("test_dice_scratch", fs)
                .set("low_data_test_dice_pretrained", lp)
                .set("low_data_test_dice_scratch", ls);
        }
        Experiment::RandomOnly => {
            let r = experiments::random_only_study(&preset)?;
            m.set("identity_dice", r.identity).set("zero_shot_dice", r.zero_shot).set("finetuned_dice", r.finetuned);
        }
        Experiment::Cost => {
            let r = experiments::cost_ratio(&preset.model, preset.pairs.shape, 40, preset.seeds[0])?;
            m.set("pretrain_seconds_per_pair", r.pretrain.median)
                .set("backbone_seconds_per_pair", r.backbone.median)
                .set("ratio", r.ratio());
        }
    }
    print!("{}", m.to_text());
    m.write(&a.out.join("summary.txt"))?;
    Ok(true)
}
