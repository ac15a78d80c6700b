//! Shared fixtures for the kernel benchmarks.

use randreg_core::net::{ConvSpec, ModelConfig, ModelMode, RegistrationModel, Tensor};
use randreg_core::synth::{make_pair, random_svf, PairConfig, TrainingPair};
use randreg_core::{Shape3, VectorField};

pub fn cube(n: usize) -> Shape3 {
    Shape3::cube(n).expect("valid cube")
}

pub fn pair(n: usize, seed: u64) -> TrainingPair {
    make_pair(&PairConfig::default().with_shape(cube(n)), seed).expect("valid pair")
}

pub fn velocity(n: usize, seed: u64) -> VectorField {
    let p = PairConfig::default();
    random_svf(cube(n), p.svf_amplitude, p.svf_frequency, seed).expect("valid field")
}

/// Input tensor, weights and layout of one convolution layer.
pub fn conv_layer(n: usize, cin: usize, cout: usize) -> (Tensor<f32>, Vec<f32>, ConvSpec) {
    let voxels = n * n * n;
    let data = (0..cin * voxels).map(|i| ((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5).collect();
    let x = Tensor { channels: cin, dims: [n, n, n], data };
    let spec = ConvSpec { cin, cout, weight: 0, bias: cin * cout * 27 };
    let params = (0..spec.bias + cout).map(|i| ((i * 40503) % 97) as f32 / 970.0 - 0.05).collect();
    (x, params, spec)
}

pub fn model(mode: ModelMode, stages: usize) -> RegistrationModel {
    RegistrationModel::new(ModelConfig { stages, ..ModelConfig::default() }.with_mode(mode), 1).expect("valid model")
}
