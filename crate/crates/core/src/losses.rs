//! Scalar objectives with exact gradients.
//!
//! Every loss evaluates in 64-bit regardless of the storage precision and
//! returns gradients in the caller's precision.

use serde::{Deserialize, Serialize};

use crate::deform::{self, SsConfig};
use crate::error::{Error, Result};
use crate::net::GaussianField;
use crate::real::Real;
use crate::volume::{spatial_gradient, warp_scalar, warp_scalar_vjp, LabelVolume, ScalarVolume, VectorField};

/// Log-variances are clamped to this range before exponentiation.
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Diffusion regulariser weight.
    pub lambda: f64,
    /// Self-distillation KL weight.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0, eta: 1e-7 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.eta >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NccConfig {
    /// Odd cube side of the local window.
    pub window: usize,
    pub epsilon: f64,
}

impl Default for NccConfig {
    fn default() -> Self {
        NccConfig { window: 9, epsilon: 1e-5 }
    }
}

impl NccConfig {
    pub fn desk() -> Self {
        NccConfig { window: 5, epsilon: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("NCC window {} must be odd and >= 3", self.window)));
        }
        Ok(())
    }
}

/// Loss value plus gradients with respect to both inputs.
#[derive(Debug, Clone)]
pub struct PairGrad<T> {
    pub value: f64,
    pub grad_a: Vec<T>,
    pub grad_b: Vec<T>,
}

/// In-place box sum over the `(2r+1)^3` window cropped to the grid.
fn box_sum(data: &mut [f64], dims: [usize; 3], r: usize) {
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let s = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                line.clear();
                line.extend((0..len).map(|t| data[base + t * s]));
                prefix.clear();
                prefix.push(0.0);
                let mut acc = 0.0;
                for &v in &line {
                    acc += v;
                    prefix.push(acc);
                }
                for t in 0..len {
                    let lo = t.saturating_sub(r);
                    let hi = (t + r + 1).min(len);
                    data[base + t * s] = prefix[hi] - prefix[lo];
                }
            }
        }
    }
}

/// Windowed local NCC loss `-mean(cc)` with
/// `cc = cross^2 / (var_a * var_b + eps)` per window. Windows are cubes of
/// side `cfg.window` cropped to the grid, and the local means divide by the
/// number of voxels actually inside, so border windows stay invariant to
/// affine intensity changes.
pub fn ncc_loss<T: Real>(a: &ScalarVolume<T>, b: &ScalarVolume<T>, cfg: &NccConfig) -> Result<PairGrad<T>> {
    cfg.validate()?;
    a.shape().ensure_same(&b.shape())?;
    let dims = a.shape().dims();
    let n = a.shape().len();
    let r = cfg.window / 2;
    let mut count = vec![1.0; n];
    box_sum(&mut count, dims, r);
    let av: Vec<f64> = a.data().iter().map(|v| v.f64()).collect();
    let bv: Vec<f64> = b.data().iter().map(|v| v.f64()).collect();

    let mut s_a = av.clone();
    let mut s_b = bv.clone();
    let mut s_aa: Vec<f64> = av.iter().map(|x| x * x).collect();
    let mut s_bb: Vec<f64> = bv.iter().map(|x| x * x).collect();
    let mut s_ab: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
    for buf in [&mut s_a, &mut s_b, &mut s_aa, &mut s_bb, &mut s_ab] {
        box_sum(buf, dims, r);
    }

    let dl = -1.0 / n as f64;
    let mut total = 0.0;
    // reuse the sum buffers for the per-window sensitivities
    for i in 0..n {
        let (sa, sb, win) = (s_a[i], s_b[i], count[i]);
        let cross = s_ab[i] - sa * sb / win;
        let var_a = s_aa[i] - sa * sa / win;
        let var_b = s_bb[i] - sb * sb / win;
        let den = var_a * var_b + cfg.epsilon;
        let cc = cross * cross / den;
        total += cc;
        let d_cross = dl * 2.0 * cross / den;
        let d_var_a = -dl * cross * cross * var_b / (den * den);
        let d_var_b = -dl * cross * cross * var_a / (den * den);
        s_ab[i] = d_cross;
        s_aa[i] = d_var_a;
        s_bb[i] = d_var_b;
        s_a[i] = -d_cross * sb / win - 2.0 * d_var_a * sa / win;
        s_b[i] = -d_cross * sa / win - 2.0 * d_var_b * sb / win;
    }
    for buf in [&mut s_a, &mut s_b, &mut s_aa, &mut s_bb, &mut s_ab] {
        box_sum(buf, dims, r);
    }
    let grad_a = (0..n).map(|i| T::of(s_a[i] + 2.0 * av[i] * s_aa[i] + bv[i] * s_ab[i])).collect();
    let grad_b = (0..n).map(|i| T::of(s_b[i] + 2.0 * bv[i] * s_bb[i] + av[i] * s_ab[i])).collect();
    Ok(PairGrad { value: -total / n as f64, grad_a, grad_b })
}

/// Mean over voxels and the nine derivative channels of squared forward
/// differences; returns the value and the gradient with respect to `u`.
pub fn diffusion_reg<T: Real>(u: &VectorField<T>) -> (f64, Vec<T>) {
    let shape = u.shape();
    let n = shape.len();
    let dims = shape.dims();
    let strides = shape.strides();
    let g = spatial_gradient(u);
    let norm = 1.0 / (9.0 * n as f64);
    let value: f64 = g.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>() * norm;
    let mut grad = vec![0.0f64; 3 * n];
    for c in 0..3 {
        for d in 0..3 {
            let plane = g.plane(c, d);
            let s = strides[d];
            for (idx, coord) in shape.iter().enumerate() {
                if coord[d] + 1 < dims[d] {
                    let v = 2.0 * norm * plane[idx].f64();
                    grad[c * n + idx + s] += v;
                    grad[c * n + idx] -= v;
                }
            }
        }
    }
    (value, grad.into_iter().map(T::of).collect())
}

/// Gradient of a Gaussian-field loss with respect to mean and log-variance.
#[derive(Debug, Clone)]
pub struct GaussianGrad<T> {
    pub mean: Vec<T>,
    pub log_variance: Vec<T>,
}

impl<T: Real> GaussianGrad<T> {
    pub fn zeros(len: usize) -> Self {
        GaussianGrad { mean: vec![T::zero(); len], log_variance: vec![T::zero(); len] }
    }
}

#[inline]
fn clamp_log_var(s: f64) -> (f64, f64) {
    if s < -LOG_VAR_CLAMP {
        (-LOG_VAR_CLAMP, 0.0)
    } else if s > LOG_VAR_CLAMP {
        (LOG_VAR_CLAMP, 0.0)
    } else {
        (s, 1.0)
    }
}

/// `KL(N(ens) || N(dec))` for diagonal Gaussians, averaged over voxels and
/// components. Returns the value and gradients for both distributions.
pub fn kl_gaussian<T: Real>(
    ens: &GaussianField<T>,
    dec: &GaussianField<T>,
) -> Result<(f64, GaussianGrad<T>, GaussianGrad<T>)> {
    ens.shape().ensure_same(&dec.shape())?;
    let len = ens.mean.data().len();
    let norm = 1.0 / len as f64;
    let mut total = 0.0;
    let mut ge = GaussianGrad::zeros(len);
    let mut gd = GaussianGrad::zeros(len);
    let (me, se) = (ens.mean.data(), ens.log_variance.data());
    let (md, sd) = (dec.mean.data(), dec.log_variance.data());
    for i in 0..len {
        let (s_e, je) = clamp_log_var(se[i].f64());
        let (s_d, jd) = clamp_log_var(sd[i].f64());
        let var_e = s_e.exp();
        let inv_var_d = (-s_d).exp();
        let diff = me[i].f64() - md[i].f64();
        total += 0.5 * (s_d - s_e) + 0.5 * (var_e + diff * diff) * inv_var_d - 0.5;
        let g_mean = norm * diff * inv_var_d;
        ge.mean[i] = T::of(g_mean);
        gd.mean[i] = T::of(-g_mean);
        ge.log_variance[i] = T::of(je * norm * (-0.5 + 0.5 * var_e * inv_var_d));
        gd.log_variance[i] = T::of(jd * norm * (0.5 - 0.5 * (var_e + diff * diff) * inv_var_d));
    }
    Ok((total * norm, ge, gd))
}

/// Soft Dice loss over `channels` probability planes:
/// `1 - mean_l (2 |A_l B_l| + eps) / (|A_l| + |B_l| + eps)`.
pub fn soft_dice_loss<T: Real>(a: &[T], b: &[T], channels: usize, epsilon: f64) -> Result<PairGrad<T>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    if channels == 0 || !a.len().is_multiple_of(channels) {
        return Err(Error::ChannelMismatch(channels, a.len()));
    }
    let n = a.len() / channels;
    let mut grad_a = vec![T::zero(); a.len()];
    let mut grad_b = vec![T::zero(); b.len()];
    let mut dice_sum = 0.0;
    let scale = 1.0 / channels as f64;
    for l in 0..channels {
        let (pa, pb) = (&a[l * n..(l + 1) * n], &b[l * n..(l + 1) * n]);
        let inter: f64 = pa.iter().zip(pb).map(|(x, y)| x.f64() * y.f64()).sum();
        let sum: f64 = pa.iter().chain(pb).map(|x| x.f64()).sum();
        let num = 2.0 * inter + epsilon;
        let den = sum + epsilon;
        dice_sum += num / den;
        let q = num / (den * den);
        for i in 0..n {
            grad_a[l * n + i] = T::of(-scale * (2.0 * pb[i].f64() / den - q));
            grad_b[l * n + i] = T::of(-scale * (2.0 * pa[i].f64() / den - q));
        }
    }
    Ok(PairGrad { value: 1.0 - dice_sum * scale, grad_a, grad_b })
}

/// `NCC(warped, fixed) + lambda * diffusion(u)`, with gradients with respect
/// to the warped image and the displacement.
#[derive(Debug, Clone)]
pub struct FinetuneLoss<T> {
    pub value: f64,
    pub similarity: f64,
    pub regularization: f64,
    pub grad_warped: Vec<T>,
    pub grad_u: Vec<T>,
}

pub fn finetune_loss<T: Real>(
    warped: &ScalarVolume<T>,
    fixed: &ScalarVolume<T>,
    u: &VectorField<T>,
    lambda: f64,
    ncc: &NccConfig,
) -> Result<FinetuneLoss<T>> {
    warped.shape().ensure_same(&u.shape())?;
    let sim = ncc_loss(warped, fixed, ncc)?;
    let (reg, mut grad_u) = diffusion_reg(u);
    grad_u.iter_mut().for_each(|g| *g = T::of(g.f64() * lambda));
    Ok(FinetuneLoss {
        value: sim.value + lambda * reg,
        similarity: sim.value,
        regularization: reg,
        grad_warped: sim.grad_a,
        grad_u,
    })
}

/// Image similarity used by the registration objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Ncc,
    Dice,
}

/// What a predicted deformation is scored against.
#[derive(Debug, Clone, Copy)]
pub struct RegistrationTarget<'a, T: Real> {
    pub fixed: &'a ScalarVolume<T>,
    pub moving: &'a ScalarVolume<T>,
    /// Required for [`SimilarityKind::Dice`].
    pub labels: Option<(&'a LabelVolume, &'a LabelVolume)>,
    pub similarity: SimilarityKind,
    pub ncc: NccConfig,
}

impl<'a, T: Real> RegistrationTarget<'a, T> {
    pub fn ncc(fixed: &'a ScalarVolume<T>, moving: &'a ScalarVolume<T>, ncc: NccConfig) -> Self {
        RegistrationTarget { fixed, moving, labels: None, similarity: SimilarityKind::Ncc, ncc }
    }
}

pub const SOFT_DICE_EPS: f64 = 1e-5;

/// Result of scoring a velocity field: loss terms, gradient with respect to
/// the velocity, and the forward products.
#[derive(Debug, Clone)]
pub struct RegistrationEval<T: Real> {
    pub similarity: f64,
    pub regularization: f64,
    pub grad_velocity: Vec<T>,
    pub phi: VectorField<T>,
    pub warped: ScalarVolume<T>,
}

impl<T: Real> RegistrationEval<T> {
    pub fn value(&self, lambda: f64) -> f64 {
        self.similarity + lambda * self.regularization
    }
}

/// `sim(m o SS(v), f) + lambda * diffusion(SS(v) - id)` and its gradient with
/// respect to `v`.
pub fn registration_objective<T: Real>(
    velocity: &VectorField<T>,
    target: &RegistrationTarget<'_, T>,
    lambda: f64,
    ss: SsConfig,
) -> Result<RegistrationEval<T>> {
    let shape = velocity.shape();
    shape.ensure_same(&target.fixed.shape())?;
    shape.ensure_same(&target.moving.shape())?;
    let trace = deform::integrate(velocity, ss);
    let u = trace.displacement();
    let phi = u.to_deformation();
    let warped = warp_scalar(target.moving, &phi)?;
    let (reg, grad_reg) = diffusion_reg(&u);

    let (similarity, grad_phi) = match target.similarity {
        SimilarityKind::Ncc => {
            let sim = ncc_loss(&warped, target.fixed, &target.ncc)?;
            let (_, gphi) = warp_scalar_vjp(target.moving, &phi, &sim.grad_a)?;
            (sim.value, gphi.into_vec())
        }
        SimilarityKind::Dice => {
            let (fixed_l, moving_l) =
                target.labels.ok_or_else(|| Error::InvalidConfig("Dice similarity requires label maps".into()))?;
            soft_dice_through_warp(moving_l, fixed_l, &phi)?
        }
    };
    let mut grad_u = grad_phi;
    for (g, r) in grad_u.iter_mut().zip(&grad_reg) {
        *g += T::of(lambda * r.f64());
    }
    let grad_velocity = deform::trace_vjp(&trace, &grad_u);
    Ok(RegistrationEval { similarity, regularization: reg, grad_velocity, phi, warped })
}

/// Soft Dice between linearly warped moving one-hot channels and the fixed
/// one-hot channels; returns the value and the gradient wrt `phi`.
fn soft_dice_through_warp<T: Real>(
    moving: &LabelVolume,
    fixed: &LabelVolume,
    phi: &VectorField<T>,
) -> Result<(f64, Vec<T>)> {
    let shape = phi.shape();
    moving.shape().ensure_same(&shape)?;
    fixed.shape().ensure_same(&shape)?;
    if moving.label_count() != fixed.label_count() {
        return Err(Error::ChannelMismatch(moving.label_count() as usize, fixed.label_count() as usize));
    }
    let channels = moving.label_count() as usize;
    let n = shape.len();
    let one_hot_m: Vec<T> = moving.one_hot();
    let one_hot_f: Vec<T> = fixed.one_hot();
    let mut warped = vec![T::zero(); channels * n];
    let planes: Vec<ScalarVolume<T>> = (0..channels)
        .map(|l| ScalarVolume::from_vec(shape, one_hot_m[l * n..(l + 1) * n].to_vec()))
        .collect::<Result<_>>()?;
    for (l, plane) in planes.iter().enumerate() {
        let w = warp_scalar(plane, phi)?;
        warped[l * n..(l + 1) * n].copy_from_slice(w.data());
    }
    let dice = soft_dice_loss(&warped, &one_hot_f, channels, SOFT_DICE_EPS)?;
    let mut grad_phi = vec![T::zero(); 3 * n];
    for (l, plane) in planes.iter().enumerate() {
        let (_, g) = warp_scalar_vjp(plane, phi, &dice.grad_a[l * n..(l + 1) * n])?;
        for (acc, v) in grad_phi.iter_mut().zip(g.data()) {
            *acc += *v;
        }
    }
    Ok((dice.value, grad_phi))
}

/// Terms and gradients of the pretraining objective.
#[derive(Debug, Clone)]
pub struct PretrainLoss<T: Real> {
    pub total: f64,
    pub similarity: f64,
    pub regularization: f64,
    /// Mean KL over stages, before weighting by `eta`.
    pub kl: f64,
    pub grad_ensemble: GaussianGrad<T>,
    pub grad_stages: Vec<GaussianGrad<T>>,
    pub phi: VectorField<T>,
    pub warped: ScalarVolume<T>,
}

/// `sim(m o SS(mu_ens), f) + lambda ||grad u_ens||^2
///  + eta / K * sum_k KL(N_ens || N_k)`.
///
/// `stages` must already be at full resolution.
pub fn pretrain_loss<T: Real>(
    ensemble: &GaussianField<T>,
    stages: &[GaussianField<T>],
    target: &RegistrationTarget<'_, T>,
    weights: &LossWeights,
    ss: SsConfig,
) -> Result<PretrainLoss<T>> {
    if stages.is_empty() {
        return Err(Error::InvalidConfig("pretraining needs at least one decoder".into()));
    }
    weights.validate()?;
    let reg = registration_objective(&ensemble.mean, target, weights.lambda, ss)?;
    let len = ensemble.mean.data().len();
    let mut grad_ensemble = GaussianGrad { mean: reg.grad_velocity, log_variance: vec![T::zero(); len] };
    let mut grad_stages = Vec::with_capacity(stages.len());
    let k = stages.len() as f64;
    let mut kl_sum = 0.0;
    for dec in stages {
        let (kl, ge, mut gd) = kl_gaussian(ensemble, dec)?;
        kl_sum += kl;
        let w = weights.eta / k;
        for i in 0..len {
            grad_ensemble.mean[i] += T::of(w * ge.mean[i].f64());
            grad_ensemble.log_variance[i] += T::of(w * ge.log_variance[i].f64());
            gd.mean[i] = T::of(w * gd.mean[i].f64());
            gd.log_variance[i] = T::of(w * gd.log_variance[i].f64());
        }
        grad_stages.push(gd);
    }
    let kl = kl_sum / k;
    Ok(PretrainLoss {
        total: reg.similarity + weights.lambda * reg.regularization + weights.eta * kl,
        similarity: reg.similarity,
        regularization: reg.regularization,
        kl,
        grad_ensemble,
        grad_stages,
        phi: reg.phi,
        warped: reg.warped,
    })
}
