use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Bias-corrected Adam. Moments are kept in 64-bit regardless of the
/// parameter precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState) -> Result<()> {
    if params.len() != state.len() {
        return Err(Error::LengthMismatch { expected: state.len(), got: params.len() });
    }
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch { expected: params.len(), got: grads.len() });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let g = g.f64();
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        *p = T::of(p.f64() - update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2, 0.1);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![0.0f64, 0.0];
        let mut s = AdamState::new(2, 0.01);
        adam_step(&mut p, &[50.0, -3.0], &mut s).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch() {
        let mut s = AdamState::new(3, 0.1);
        assert!(adam_step(&mut [0.0f64; 2], &[0.0; 2], &mut s).is_err());
    }
}
