//! Deformable 3D image registration with encoder pretraining on randomly
//! generated image pairs.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`]: dense scalar, vector and label grids, trilinear sampling,
//!   warping, composition, finite differences and Jacobians.
//! * [`synth`]: Perlin-noise shape images, random stationary velocity fields
//!   and registration pair generation.
//! * [`deform`]: scaling-and-squaring integration and its adjoint.
//! * [`losses`]: local NCC, diffusion regularisation, Gaussian KL
//!   self-distillation, soft Dice and the composite objectives.
//! * [`net`]: the convolutional encoder, lightweight decoders, ensemble head,
//!   U-shaped backbone decoder and checkpoints.
//! * [`train`]: Adam, pretraining, fine-tuning, instance optimisation and the
//!   desk-scale experiment matrix.
//! * [`metrics`]: Dice, non-diffeomorphic volume and target registration error.
//! * [`io`]: RVOL, NIfTI-1, landmarks, curve export and run manifests.

pub mod deform;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod real;
pub mod rng;
pub mod selftest;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use net::{GaussianField, ModelConfig, ModelMode, RegistrationModel};
pub use real::Real;
pub use volume::{FieldKind, LabelVolume, ScalarVolume, Shape3, VectorField};
