//! The registration network.
//!
//! A K-stage convolutional encoder feeds either lightweight per-stage
//! decoders plus an ensemble head (pretraining) or a U-shaped decoder with
//! skip connections (the fine-tuning backbone). Every layer has a hand-written
//! adjoint; intermediates are recorded by the forward pass.

mod checkpoint;
mod layers;
mod model;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use layers::{
    avg_pool2, avg_pool2_backward, conv3d, conv3d_backward, leaky_relu, leaky_relu_backward, ConvSpec, Tensor,
    LEAKY_SLOPE,
};
pub use model::{BackboneOutput, PretrainOutput, RegistrationModel};
pub use params::{ParamEntry, ParamStore};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{FieldKind, Shape3, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Pretrain,
    Backbone,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Pretrain => "pretrain",
            ModelMode::Backbone => "backbone",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(ModelMode::Pretrain),
            "backbone" => Some(ModelMode::Backbone),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stages: usize,
    /// Channels of the first encoder stage; doubled at each further stage.
    pub base_channels: usize,
    /// Width of the lightweight decoder convolutions.
    pub decoder_channels: usize,
    pub mode: ModelMode,
    pub ss_steps: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { stages: 4, base_channels: 8, decoder_channels: 8, mode: ModelMode::Pretrain, ss_steps: 7 }
    }
}

impl ModelConfig {
    pub fn with_mode(mut self, mode: ModelMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::InvalidConfig("model needs at least two stages".into()));
        }
        if self.base_channels == 0 || self.decoder_channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if self.stages > 8 {
            return Err(Error::InvalidConfig("at most 8 stages".into()));
        }
        crate::deform::SsConfig::new(self.ss_steps)?;
        Ok(())
    }

    pub fn stage_channels(&self, k: usize) -> usize {
        self.base_channels << k
    }

    /// Checks that `shape` survives `stages` halvings with at least two voxels
    /// per axis left.
    pub fn check_input(&self, shape: Shape3) -> Result<()> {
        let f = 1usize << self.stages;
        for n in shape.dims() {
            if n % f != 0 || n / f < 2 {
                return Err(Error::InvalidConfig(format!(
                    "input {:?} must be divisible by {f} with at least 2 voxels per axis at the coarsest stage",
                    shape.dims()
                )));
            }
        }
        Ok(())
    }

    /// True when the encoder parameter layout of `self` and `other` agree.
    pub fn encoder_compatible(&self, other: &ModelConfig) -> bool {
        self.stages == other.stages && self.base_channels == other.base_channels
    }
}

/// Diagonal Gaussian over a velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField<T: Real = f32> {
    pub mean: VectorField<T>,
    pub log_variance: VectorField<T>,
}

impl<T: Real> GaussianField<T> {
    pub fn zeros(shape: Shape3) -> Self {
        GaussianField {
            mean: VectorField::zeros(shape, FieldKind::Velocity),
            log_variance: VectorField::zeros(shape, FieldKind::Velocity),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.mean.shape()
    }

    /// Resamples both fields to `shape`; means are not rescaled.
    pub fn resample(&self, shape: Shape3) -> Self {
        let r = |v: &VectorField<T>| {
            let data = crate::volume::resample_channels(v.data(), 3, self.shape().dims(), shape.dims());
            VectorField::from_vec(shape, data, FieldKind::Velocity).expect("resampled length")
        };
        if shape == self.shape() {
            return self.clone();
        }
        GaussianField { mean: r(&self.mean), log_variance: r(&self.log_variance) }
    }
}
