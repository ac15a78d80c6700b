//! Built-in verification suites: reverse-mode gradients against central
//! differences, diffeomorphism of integrated fields, closed-form loss values
//! and the accuracy of scaling and squaring.
//!
//! Every check runs in 64-bit on small grids and is deterministic.

use std::fmt;
use std::time::Instant;

use rand::Rng;

use crate::deform::{integrate, scaling_and_squaring, ss_vjp, SsConfig};
use crate::error::Result;
use crate::losses::{
    diffusion_reg, kl_gaussian, ncc_loss, pretrain_loss, registration_objective, soft_dice_loss, LossWeights,
    NccConfig, RegistrationTarget,
};
use crate::metrics::{ndv_percent, NdvMode};
use crate::net::{
    avg_pool2, avg_pool2_backward, conv3d, conv3d_backward, leaky_relu, leaky_relu_backward, ConvSpec, GaussianField,
    ModelConfig, ModelMode, RegistrationModel, Tensor,
};
use crate::rng::{derive_seed, rng_from};
use crate::synth::{random_svf, PairConfig};
use crate::train::{adam_step, AdamState};
use crate::volume::{sample_displacement, warp_scalar, warp_scalar_vjp, FieldKind, ScalarVolume, Shape3, VectorField};

/// Relative error allowed between analytic and finite-difference gradients.
pub const GRAD_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Diffeomorphism,
    LossOracles,
    ScalingSquaring,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradients, Suite::Diffeomorphism, Suite::LossOracles, Suite::ScalingSquaring];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Diffeomorphism => "diffeomorphism",
            Suite::LossOracles => "loss-oracles",
            Suite::ScalingSquaring => "scaling-squaring",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// One measured quantity and its bound.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: String,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{verdict} {:<40} {:>12.4e}  ({})", self.name, self.value, self.limit)
    }
}

fn below(name: impl Into<String>, value: f64, limit: f64) -> Check {
    Check { name: name.into(), value, limit: format!("< {limit:e}"), passed: value < limit }
}

fn within(name: impl Into<String>, value: f64, target: f64, tol: f64) -> Check {
    Check { name: name.into(), value, limit: format!("{target} ± {tol:e}"), passed: (value - target).abs() <= tol }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "[{verdict}] {} ({:.1} s)", self.suite.name(), self.seconds)?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let started = Instant::now();
    let checks = match suite {
        Suite::Gradients => gradient_suite()?,
        Suite::Diffeomorphism => diffeomorphism_suite()?,
        Suite::LossOracles => loss_oracle_suite()?,
        Suite::ScalingSquaring => ss_suite()?,
    };
    Ok(SuiteReport { suite, checks, seconds: started.elapsed().as_secs_f64() })
}

pub fn run_all() -> Result<Vec<SuiteReport>> {
    Suite::ALL.into_iter().map(run_suite).collect()
}

fn uniform(len: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn volume(s: Shape3, seed: u64) -> ScalarVolume<f64> {
    ScalarVolume::from_vec(s, uniform(s.len(), 0.0, 1.0, seed)).expect("length matches")
}

fn field(s: Shape3, kind: FieldKind, amplitude: f64, seed: u64) -> VectorField<f64> {
    VectorField::from_vec(s, uniform(3 * s.len(), -amplitude, amplitude, seed), kind).expect("length matches")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evenly spread indices plus the one with the largest analytic gradient.
fn picks(grad: &[f64], count: usize) -> Vec<usize> {
    let n = grad.len();
    let mut idx: Vec<usize> =
        (0..count.min(n)).map(|i| i * n / count.min(n) + (i * 7) % (n / count.min(n)).max(1)).collect();
    let top = (0..n).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap_or(0);
    idx.push(top);
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Largest relative error between `grad` and central differences of `f`
/// over a sample of coordinates.
fn max_rel_error(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], count: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in picks(grad, count) {
        let h = 1e-6 * x[i].abs().max(1.0);
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

fn gradient_suite() -> Result<Vec<Check>> {
    let s8 = Shape3::cube(8)?;
    let s6 = Shape3::cube(6)?;
    let mut out = Vec::new();

    // conv -> leaky -> pool -> conv, linear readout
    {
        let x = Tensor::from_planes([8, 8, 8], &[&uniform(512, -1.0, 1.0, 1), &uniform(512, -1.0, 1.0, 2)]);
        let c1 = ConvSpec { cin: 2, cout: 3, weight: 0, bias: 162 };
        let c2 = ConvSpec { cin: 3, cout: 2, weight: 165, bias: 327 };
        let params = uniform(329, -0.3, 0.3, 3);
        let readout = uniform(2 * 64, -1.0, 1.0, 4);
        let forward = |x: &Tensor<f64>, p: &[f64]| {
            let z1 = conv3d(x, p, c1);
            let pooled = avg_pool2(&leaky_relu(&z1));
            let z2 = conv3d(&pooled, p, c2);
            (z1, pooled, dot(&z2.data, &readout))
        };
        let (z1, pooled, _) = forward(&x, &params);
        let mut grads = vec![0.0; params.len()];
        let g2 = Tensor { channels: 2, dims: [4, 4, 4], data: readout.clone() };
        let gp = conv3d_backward(&pooled, &g2, &params, c2, &mut grads, true);
        let mut ga = avg_pool2_backward(&gp, [8, 8, 8]);
        leaky_relu_backward(&z1, &mut ga);
        let gx = conv3d_backward(&x, &ga, &params, c1, &mut grads, true);
        let ep = max_rel_error(|p| forward(&x, p).2, &params, &grads, 40);
        let ex = max_rel_error(
            |d| forward(&Tensor { channels: 2, dims: [8, 8, 8], data: d.to_vec() }, &params).2,
            &x.data,
            &gx.data,
            40,
        );
        out.push(below("conv stack / weights", ep, GRAD_TOL));
        out.push(below("conv stack / input", ex, GRAD_TOL));
    }

    // trilinear warp
    {
        let m = volume(s8, 5);
        let mut phi = field(s8, FieldKind::Displacement, 1.4, 6).to_deformation();
        phi.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.1, 6.9));
        let r = uniform(s8.len(), -1.0, 1.0, 7);
        let (gm, gphi) = warp_scalar_vjp(&m, &phi, &r)?;
        let loss = |m: &ScalarVolume<f64>, phi: &VectorField<f64>| dot(warp_scalar(m, phi).expect("shape").data(), &r);
        let em =
            max_rel_error(|d| loss(&ScalarVolume::from_vec(s8, d.to_vec()).expect("len"), &phi), m.data(), &gm, 40);
        let ephi = max_rel_error(
            |d| loss(&m, &VectorField::from_vec(s8, d.to_vec(), FieldKind::Deformation).expect("len")),
            phi.data(),
            gphi.data(),
            40,
        );
        out.push(below("warp / image", em, GRAD_TOL));
        out.push(below("warp / deformation", ephi, GRAD_TOL));
    }

    // scaling and squaring
    for n in [0u32, 1, 4, 7] {
        let v = field(s8, FieldKind::Velocity, 2.0, 8 + n as u64);
        let r = field(s8, FieldKind::Deformation, 1.0, 20 + n as u64);
        let cfg = SsConfig::new(n)?;
        let g = ss_vjp(&v, cfg, &r)?;
        let loss = |d: &[f64]| {
            let v = VectorField::from_vec(s8, d.to_vec(), FieldKind::Velocity).expect("len");
            dot(scaling_and_squaring(&v, cfg).data(), r.data())
        };
        out.push(below(format!("scaling and squaring N={n}"), max_rel_error(loss, v.data(), g.data(), 40), GRAD_TOL));
    }

    // NCC, both inputs
    for window in [3usize, 5] {
        let (a, b) = (volume(s6, 30), volume(s6, 31));
        let cfg = NccConfig { window, epsilon: 1e-5 };
        let g = ncc_loss(&a, &b, &cfg)?;
        let ea = max_rel_error(
            |d| ncc_loss(&ScalarVolume::from_vec(s6, d.to_vec()).expect("len"), &b, &cfg).expect("shape").value,
            a.data(),
            &g.grad_a,
            40,
        );
        let eb = max_rel_error(
            |d| ncc_loss(&a, &ScalarVolume::from_vec(s6, d.to_vec()).expect("len"), &cfg).expect("shape").value,
            b.data(),
            &g.grad_b,
            40,
        );
        out.push(below(format!("NCC w{window} / first"), ea, GRAD_TOL));
        out.push(below(format!("NCC w{window} / second"), eb, GRAD_TOL));
    }

    // diffusion regulariser
    {
        let u = field(s6, FieldKind::Displacement, 1.0, 40);
        let (_, g) = diffusion_reg(&u);
        let e = max_rel_error(
            |d| diffusion_reg(&VectorField::from_vec(s6, d.to_vec(), FieldKind::Displacement).expect("len")).0,
            u.data(),
            &g,
            40,
        );
        out.push(below("diffusion", e, GRAD_TOL));
    }

    // Gaussian KL, all four fields
    {
        let gauss = |seed: u64| GaussianField {
            mean: field(s6, FieldKind::Velocity, 1.0, seed),
            log_variance: field(s6, FieldKind::Velocity, 2.0, seed + 1),
        };
        let (ens, dec) = (gauss(50), gauss(52));
        let (_, ge, gd) = kl_gaussian(&ens, &dec)?;
        let vf = |d: &[f64]| VectorField::from_vec(s6, d.to_vec(), FieldKind::Velocity).expect("len");
        let kl = |e: &GaussianField<f64>, d: &GaussianField<f64>| kl_gaussian(e, d).expect("shape").0;
        let parts: [(&str, &VectorField<f64>, &[f64], Box<dyn Fn(&[f64]) -> f64>); 4] = [
            (
                "KL / ensemble mean",
                &ens.mean,
                &ge.mean,
                Box::new(|d| kl(&GaussianField { mean: vf(d), ..ens.clone() }, &dec)),
            ),
            (
                "KL / ensemble log-variance",
                &ens.log_variance,
                &ge.log_variance,
                Box::new(|d| kl(&GaussianField { log_variance: vf(d), ..ens.clone() }, &dec)),
            ),
            (
                "KL / decoder mean",
                &dec.mean,
                &gd.mean,
                Box::new(|d| kl(&ens, &GaussianField { mean: vf(d), ..dec.clone() })),
            ),
            (
                "KL / decoder log-variance",
                &dec.log_variance,
                &gd.log_variance,
                Box::new(|d| kl(&ens, &GaussianField { log_variance: vf(d), ..dec.clone() })),
            ),
        ];
        for (name, x, g, f) in parts {
            out.push(below(name, max_rel_error(f, x.data(), g, 30), GRAD_TOL));
        }
    }

    // soft Dice
    {
        let channels = 3;
        let a = uniform(channels * s6.len(), 0.0, 1.0, 60);
        let b = uniform(channels * s6.len(), 0.0, 1.0, 61);
        let g = soft_dice_loss(&a, &b, channels, 1e-5)?;
        let e = max_rel_error(|d| soft_dice_loss(d, &b, channels, 1e-5).expect("len").value, &a, &g.grad_a, 40);
        out.push(below("soft Dice", e, GRAD_TOL));
    }

    out.push(below("pretraining objective / parameters", full_model_error(ModelMode::Pretrain)?, GRAD_TOL));
    out.push(below("fine-tuning objective / parameters", full_model_error(ModelMode::Backbone)?, GRAD_TOL));
    Ok(out)
}

/// End-to-end check of every parameter tensor of a small model on 8³ inputs.
fn full_model_error(mode: ModelMode) -> Result<f64> {
    let s = Shape3::cube(8)?;
    let f = ScalarVolume::from_fn(s, |[i, j, k]| (0.7 * i as f64).sin() + (0.5 * j as f64 - 0.3 * k as f64).cos());
    let m = ScalarVolume::from_fn(s, |[i, j, k]| {
        (0.6 * i as f64 + 0.2).sin() + 0.9 * (0.45 * j as f64).cos() + 0.1 * k as f64
    });
    let config = ModelConfig { stages: 2, base_channels: 2, decoder_channels: 2, mode, ss_steps: 4 };
    let mut model = RegistrationModel::<f64>::new(config, 5)?;
    let random = uniform(model.param_count(), -0.15, 0.15, 70);
    model.params_mut().values_mut().copy_from_slice(&random);
    let weights = LossWeights { lambda: 0.5, eta: 0.3 };
    let ncc = NccConfig { window: 3, epsilon: 1e-5 };
    let ss = SsConfig::new(4)?;
    let target = RegistrationTarget::ncc(&f, &m, ncc);
    let value = |model: &mut RegistrationModel<f64>| -> Result<f64> {
        Ok(match mode {
            ModelMode::Pretrain => {
                let out = model.forward_pretrain(&f, &m)?;
                pretrain_loss(&out.ensemble, &out.stages_full, &target, &weights, ss)?.total
            }
            ModelMode::Backbone => {
                let out = model.forward_backbone(&f, &m)?;
                registration_objective(&out.velocity, &target, weights.lambda, ss)?.value(weights.lambda)
            }
        })
    };
    let grads = match mode {
        ModelMode::Pretrain => {
            let out = model.forward_pretrain(&f, &m)?;
            let l = pretrain_loss(&out.ensemble, &out.stages_full, &target, &weights, ss)?;
            model.backward_pretrain(&l.grad_ensemble, &l.grad_stages)?
        }
        ModelMode::Backbone => {
            let out = model.forward_backbone(&f, &m)?;
            let r = registration_objective(&out.velocity, &target, weights.lambda, ss)?;
            model.backward_backbone(&r.grad_velocity)?
        }
    };
    let base = model.params().values().to_vec();
    let mut worst: f64 = 0.0;
    for e in model.params().entries().to_vec() {
        let range = e.range();
        let local = &grads[range.clone()];
        let err = max_rel_error(
            |d| {
                let mut p = base.clone();
                p[range.clone()].copy_from_slice(d);
                let mut mm = model.clone();
                mm.params_mut().values_mut().copy_from_slice(&p);
                value(&mut mm).expect("valid model")
            },
            &base[range.clone()],
            local,
            3,
        );
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Seeds of the diffeomorphism suite.
pub const NDV_SEEDS: u64 = 50;

fn diffeomorphism_suite() -> Result<Vec<Check>> {
    let pairs = PairConfig::default();
    let ss = SsConfig::new(pairs.ss_steps)?;
    let mut worst: f64 = 0.0;
    let mut folded = 0usize;
    for i in 0..NDV_SEEDS {
        let v = random_svf(pairs.shape, pairs.svf_amplitude, pairs.svf_frequency, derive_seed(0x5EED, i))?;
        let ndv = ndv_percent(&scaling_and_squaring(&v, ss), NdvMode::Fractional)?;
        worst = worst.max(ndv);
        folded += usize::from(ndv > 0.0);
    }
    let s = pairs.shape;
    let n = s.dims()[0] as f64;
    let fold = VectorField::<f64>::from_fn(s, FieldKind::Displacement, |[i, _, _]| {
        [3.0 * (2.0 * std::f64::consts::PI * i as f64 / (n / 4.0)).sin(), 0.0, 0.0]
    })
    .to_deformation();
    let fold_ndv = ndv_percent(&fold, NdvMode::Fractional)?;
    Ok(vec![
        Check {
            name: format!("%NDV over {NDV_SEEDS} integrated fields (max)"),
            value: worst,
            limit: format!("= 0 ({folded} folded)"),
            passed: worst == 0.0,
        },
        Check { name: "%NDV of a folding field".into(), value: fold_ndv, limit: "> 0".into(), passed: fold_ndv > 0.0 },
    ])
}

/// Textbook Adam written independently of [`adam_step`].
fn adam_oracle(x0: &[f64], grad: impl Fn(&[f64]) -> Vec<f64>, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut x = x0.to_vec();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let (mut p1, mut p2) = (1.0, 1.0);
    for _ in 0..steps {
        let g = grad(&x);
        p1 *= b1;
        p2 *= b2;
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - p1);
            let v_hat = v[i] / (1.0 - p2);
            x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    x
}

fn loss_oracle_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let s = Shape3::cube(16)?;
    let f = volume(s, 80);
    let m = volume(s, 81);
    for window in [5usize, 9] {
        let cfg = NccConfig { window, epsilon: 1e-5 };
        out.push(within(format!("NCC(f, f) w{window}"), ncc_loss(&f, &f, &cfg)?.value, -1.0, 1e-3));
        let base = ncc_loss(&m, &f, &cfg)?.value;
        let affine = ncc_loss(&m.map(|v| 2.5 * v - 0.8), &f, &cfg)?.value;
        out.push(below(format!("NCC affine invariance w{window}"), (affine - base).abs(), 1e-3));
    }

    let one = Shape3::cube(2)?;
    let gf = |mean: f64| GaussianField {
        mean: VectorField::<f64>::from_fn(one, FieldKind::Velocity, |_| [mean; 3]),
        log_variance: VectorField::zeros(one, FieldKind::Velocity),
    };
    let (kl, _, _) = kl_gaussian(&gf(0.0), &gf(1.0))?;
    out.push(within("KL(N(0,1) || N(1,1))", kl, 0.5, 1e-15));

    let constant = VectorField::<f64>::from_fn(s, FieldKind::Displacement, |_| [0.3, -1.2, 2.0]);
    out.push(within("diffusion(constant)", diffusion_reg(&constant).0, 0.0, 0.0));

    let a = [1.0, 10.0, 0.1, 3.0, 0.5];
    let c = [0.4, -1.0, 2.0, 0.0, -0.3];
    let grad = |x: &[f64]| x.iter().zip(a.iter().zip(&c)).map(|(x, (a, c))| a * (x - c)).collect::<Vec<_>>();
    let x0 = [1.0, 1.0, -1.0, 0.5, 2.0];
    let expected = adam_oracle(&x0, grad, 0.05, 100);
    let mut x = x0.to_vec();
    let mut state = AdamState::new(x.len(), 0.05);
    for _ in 0..100 {
        let g = grad(&x);
        adam_step(&mut x, &g, &mut state)?;
    }
    let diff = x.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(below("Adam vs textbook oracle, 100 steps", diff, 1e-10));
    Ok(out)
}

/// Interior margin, in voxels, of the flow comparison.
const FLOW_MARGIN: usize = 4;
const EULER_STEPS: usize = 128;

/// Largest interior distance between `exp(v)` and an explicit Euler
/// integration of each voxel's trajectory.
pub fn euler_discrepancy(v: &VectorField<f64>, ss: SsConfig) -> f64 {
    let s = v.shape();
    let phi = scaling_and_squaring(v, ss);
    let h = 1.0 / EULER_STEPS as f64;
    let mut worst: f64 = 0.0;
    for c in s.iter() {
        if !s.is_interior(c, FLOW_MARGIN) {
            continue;
        }
        let mut p = [c[0] as f64, c[1] as f64, c[2] as f64];
        for _ in 0..EULER_STEPS {
            let d = sample_displacement(v, p);
            for a in 0..3 {
                p[a] += h * d[a];
            }
        }
        let q = phi.get(c[0], c[1], c[2]);
        let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        worst = worst.max(dist);
    }
    worst
}

fn ss_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let s = Shape3::cube(16)?;
    let c = [1.3, -0.7, 2.1];
    let v = VectorField::<f64>::from_fn(s, FieldKind::Velocity, |_| c);
    let phi = scaling_and_squaring(&v, SsConfig::default());
    let mut err: f64 = 0.0;
    for p in s.iter() {
        if s.is_interior(p, 3) {
            let q = phi.get(p[0], p[1], p[2]);
            for a in 0..3 {
                err = err.max((q[a] - (p[a] as f64 + c[a])).abs());
            }
        }
    }
    out.push(below("SS(constant) vs translation", err, 1e-4));

    let pairs = PairConfig::default();
    let ss = SsConfig::new(pairs.ss_steps)?;
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let v = random_svf(pairs.shape, pairs.svf_amplitude, pairs.svf_frequency, derive_seed(0xE1, i))?.cast::<f64>();
        worst = worst.max(euler_discrepancy(&v, ss));
    }
    out.push(below("SS vs 128-step Euler flow (max)", worst, 0.05));

    let trace = integrate(&field(Shape3::cube(8)?, FieldKind::Velocity, 0.5, 90), SsConfig::new(0)?);
    let zero_steps = trace.displacement();
    let v0 = field(Shape3::cube(8)?, FieldKind::Velocity, 0.5, 90);
    let same = zero_steps.data().iter().zip(v0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(within("SS with N=0 returns v", same, 0.0, 0.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_cover_top_gradient() {
        let g = [0.0, 5.0, -9.0, 1.0];
        assert!(picks(&g, 2).contains(&2));
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(s));
        }
    }

    #[test]
    fn loss_oracles_pass() {
        let r = run_suite(Suite::LossOracles).unwrap();
        assert!(r.passed(), "{r}");
    }
}
