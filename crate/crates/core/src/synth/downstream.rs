//! A second synthetic family standing in for a downstream anatomical dataset.
//!
//! One template anatomy (coarser shapes, fewer labels) carries per-region
//! smooth intensity ramps. Every volume, the atlas included, is the template
//! under its own random diffeomorphism plus mild Gaussian noise. Registration
//! is atlas-to-subject: the atlas is always the moving image.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{labels_with, random_svf, PerlinConfig};
use crate::deform::{scaling_and_squaring, SsConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::volume::{warp_labels, warp_scalar, LabelVolume, ScalarVolume, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    #[serde(with = "super::shape_serde")]
    pub shape: Shape3,
    pub labels: u16,
    pub label_frequency: u32,
    /// Intensity change across the grid within one region.
    pub intensity_ramp: f64,
    pub noise_std: f64,
    pub deform_amplitude: f64,
    pub deform_frequency: u32,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            shape: Shape3 { nx: 32, ny: 32, nz: 32 },
            labels: 8,
            label_frequency: 3,
            intensity_ramp: 0.3,
            noise_std: 0.02,
            deform_amplitude: 2.5,
            deform_frequency: 3,
            train: 64,
            val: 16,
            test: 16,
            seed: 2024,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        Shape3::from_dims(self.shape.dims())?;
        if self.labels < 2 {
            return Err(Error::InvalidConfig("downstream family needs >= 2 labels".into()));
        }
        if self.train == 0 {
            return Err(Error::EmptyDataset);
        }
        if !(self.noise_std >= 0.0 && self.deform_amplitude >= 0.0) {
            return Err(Error::InvalidConfig("noise and deformation must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub image: ScalarVolume,
    pub labels: LabelVolume,
}

#[derive(Debug, Clone)]
pub struct DownstreamDataset {
    pub config: DownstreamConfig,
    pub atlas: Subject,
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
}

impl DownstreamDataset {
    pub fn generate(cfg: &DownstreamConfig) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.shape;
        let perlin = PerlinConfig {
            base_frequency: cfg.label_frequency,
            seed: derive_seed(cfg.seed, 0),
            ..PerlinConfig::default()
        };
        let template_labels = labels_with(shape, &perlin, cfg.labels)?;
        let template = ramp_intensities(&template_labels, cfg.intensity_ramp, derive_seed(cfg.seed, 1));
        let make = |index: u64| -> Result<Subject> {
            let seed = derive_seed(cfg.seed, 100 + index);
            let v = random_svf(shape, cfg.deform_amplitude, cfg.deform_frequency, derive_seed(seed, 0))?;
            let phi = scaling_and_squaring(&v, SsConfig::default());
            let mut image = warp_scalar(&template, &phi)?;
            if cfg.noise_std > 0.0 {
                let normal = Normal::new(0.0, cfg.noise_std).expect("finite std");
                let mut rng = rng_from(derive_seed(seed, 1));
                for x in image.data_mut() {
                    *x += normal.sample(&mut rng) as f32;
                }
            }
            let labels = warp_labels(&template_labels, &phi)?;
            Ok(Subject { image, labels })
        };
        let atlas = make(0)?;
        let mut idx = 1u64;
        let mut take = |count: usize| -> Result<Vec<Subject>> {
            (0..count)
                .map(|_| {
                    let s = make(idx);
                    idx += 1;
                    s
                })
                .collect()
        };
        let train = take(cfg.train)?;
        let val = take(cfg.val)?;
        let test = take(cfg.test)?;
        Ok(DownstreamDataset { config: *cfg, atlas, train, val, test })
    }
}

/// Per-region base intensity in [0.1, 0.9) plus a linear ramp along a random
/// direction whose total swing across the grid is `ramp`.
fn ramp_intensities(labels: &LabelVolume, ramp: f64, seed: u64) -> ScalarVolume {
    let mut rng = rng_from(seed);
    let shape = labels.shape();
    let dims = shape.dims();
    let params: Vec<(f64, [f64; 3])> = (0..labels.label_count())
        .map(|_| {
            let base = 0.1 + 0.8 * rng.random::<f64>();
            let mut d = [0.0; 3];
            for x in d.iter_mut() {
                *x = rng.random::<f64>() * 2.0 - 1.0;
            }
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            (base, d.map(|x| x / norm))
        })
        .collect();
    let data = shape
        .iter()
        .zip(labels.data())
        .map(|(c, &l)| {
            let (base, dir) = params[l as usize];
            let t: f64 = (0..3).map(|a| dir[a] * (c[a] as f64 / (dims[a] - 1) as f64 - 0.5)).sum();
            (base + ramp * t) as f32
        })
        .collect();
    ScalarVolume::from_vec(shape, data).expect("label shape")
}
