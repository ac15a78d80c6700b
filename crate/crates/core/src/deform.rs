//! Stationary velocity field integration by scaling-and-squaring.
//!
//! `phi = exp(v)` is approximated by `phi_0 = id + v / 2^N` followed by `N`
//! self-compositions. The recursion runs on displacements,
//! `u_{k+1}(x) = u_k(x) + u_k(x + u_k(x))`, and [`ss_vjp`] differentiates
//! through every composition exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::interp::{compose_displacements, compose_displacements_vjp};
use crate::volume::{FieldKind, Shape3, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsConfig {
    pub steps: u32,
}

impl Default for SsConfig {
    fn default() -> Self {
        SsConfig { steps: 7 }
    }
}

impl SsConfig {
    pub const MAX_STEPS: u32 = 12;

    pub fn new(steps: u32) -> Result<Self> {
        let cfg = SsConfig { steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > Self::MAX_STEPS {
            return Err(Error::InvalidConfig(format!(
                "scaling-and-squaring steps {} exceeds {}",
                self.steps,
                Self::MAX_STEPS
            )));
        }
        Ok(())
    }
}

/// Intermediate displacements `u_0 .. u_N` of one integration.
#[derive(Debug, Clone)]
pub struct SsTrace<T: Real> {
    shape: Shape3,
    steps: Vec<Vec<T>>,
}

impl<T: Real> SsTrace<T> {
    pub fn displacement(&self) -> VectorField<T> {
        let last = self.steps.last().expect("at least u_0").clone();
        VectorField::from_vec(self.shape, last, FieldKind::Displacement).expect("length matches")
    }

    pub fn deformation(&self) -> VectorField<T> {
        self.displacement().to_deformation()
    }
}

/// Integrates `v` and keeps the intermediates for [`SsTrace`]-based adjoints.
pub fn integrate<T: Real>(v: &VectorField<T>, cfg: SsConfig) -> SsTrace<T> {
    let shape = v.shape();
    let scale = T::of(0.5f64.powi(cfg.steps as i32));
    let mut steps = Vec::with_capacity(cfg.steps as usize + 1);
    steps.push(v.data().iter().map(|&x| x * scale).collect::<Vec<T>>());
    for _ in 0..cfg.steps {
        let u = steps.last().unwrap();
        let next = compose_displacements(u, u, shape);
        steps.push(next);
    }
    SsTrace { shape, steps }
}

/// `exp(v)` as a deformation field.
pub fn scaling_and_squaring<T: Real>(v: &VectorField<T>, cfg: SsConfig) -> VectorField<T> {
    integrate(v, cfg).deformation()
}

/// `u = phi - id`; fails unless `phi` is a deformation.
pub fn displacement_of<T: Real>(phi: &VectorField<T>) -> Result<VectorField<T>> {
    phi.to_displacement()
}

/// Gradient with respect to the velocity given the gradient with respect to
/// the final displacement (equivalently the deformation) of a recorded trace.
pub fn trace_vjp<T: Real>(trace: &SsTrace<T>, grad_phi: &[T]) -> Vec<T> {
    let shape = trace.shape;
    let mut g = grad_phi.to_vec();
    for k in (0..trace.steps.len() - 1).rev() {
        let u = &trace.steps[k];
        let mut ga = vec![T::zero(); g.len()];
        let mut gb = vec![T::zero(); g.len()];
        compose_displacements_vjp(u, u, shape, &g, &mut ga, &mut gb);
        for ((a, b), out) in ga.iter().zip(&gb).zip(g.iter_mut()) {
            *out = *a + *b;
        }
    }
    let n_steps = (trace.steps.len() - 1) as i32;
    let scale = T::of(0.5f64.powi(n_steps));
    g.iter_mut().for_each(|x| *x *= scale);
    g
}

/// Reverse-mode derivative of [`scaling_and_squaring`] with respect to `v`.
pub fn ss_vjp<T: Real>(v: &VectorField<T>, cfg: SsConfig, grad_phi: &VectorField<T>) -> Result<VectorField<T>> {
    v.shape().ensure_same(&grad_phi.shape())?;
    let trace = integrate(v, cfg);
    let g = trace_vjp(&trace, grad_phi.data());
    VectorField::from_vec(v.shape(), g, FieldKind::Velocity)
}
