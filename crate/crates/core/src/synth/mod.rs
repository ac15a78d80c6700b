//! Random shape images, random diffeomorphisms and registration pairs.
//!
//! A shape image is the argmax over `C` independent Perlin channels, each
//! region painted with one constant intensity. Two stationary velocity fields
//! drawn from three-channel Perlin noise are integrated by
//! scaling-and-squaring and applied to the same image to form a pair. No
//! noise or bias field is added.

mod downstream;
mod perlin;

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use downstream::{DownstreamConfig, DownstreamDataset, Subject};
pub use perlin::{perlin3, PerlinConfig};

use crate::deform::{scaling_and_squaring, SsConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::volume::{warp_labels, warp_scalar, FieldKind, LabelVolume, ScalarVolume, Shape3, VectorField};

/// How per-region intensities are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityPolicy {
    /// Fresh intensities for every pair.
    PerPair,
    /// One fixed palette for every pair.
    Fixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    #[serde(with = "shape_serde")]
    pub shape: Shape3,
    /// Number of Perlin channels, i.e. shapes.
    pub channels: u16,
    pub label_frequency: u32,
    pub label_octaves: u32,
    /// Largest velocity component, in voxels.
    pub svf_amplitude: f64,
    pub svf_frequency: u32,
    pub ss_steps: u32,
    pub intensity_policy: IntensityPolicy,
    pub emit_labels: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            shape: Shape3 { nx: 32, ny: 32, nz: 32 },
            channels: 16,
            label_frequency: 4,
            label_octaves: 1,
            svf_amplitude: 3.0,
            svf_frequency: 4,
            ss_steps: 7,
            intensity_policy: IntensityPolicy::PerPair,
            emit_labels: true,
        }
    }
}

impl PairConfig {
    pub fn with_shape(mut self, shape: Shape3) -> Self {
        self.shape = shape;
        self
    }

    pub fn validate(&self) -> Result<()> {
        Shape3::from_dims(self.shape.dims())?;
        if self.channels < 2 {
            return Err(Error::InvalidConfig("pair generation needs at least 2 channels".into()));
        }
        if !(self.svf_amplitude >= 0.0) {
            return Err(Error::InvalidConfig("svf_amplitude must be >= 0".into()));
        }
        SsConfig::new(self.ss_steps)?;
        self.label_perlin(0).validate()?;
        Ok(())
    }

    fn label_perlin(&self, seed: u64) -> PerlinConfig {
        PerlinConfig { base_frequency: self.label_frequency, octaves: self.label_octaves, persistence: 0.5, seed }
    }
}

pub(crate) mod shape_serde {
    use super::Shape3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(s: &Shape3, ser: S) -> Result<S::Ok, S::Error> {
        s.dims().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Shape3, D::Error> {
        let d = <[usize; 3]>::deserialize(de)?;
        Shape3::from_dims(d).map_err(serde::de::Error::custom)
    }
}

/// A generated registration pair and the fields that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub fixed: ScalarVolume,
    pub moving: ScalarVolume,
    pub fixed_labels: Option<LabelVolume>,
    pub moving_labels: Option<LabelVolume>,
    pub phi_to_fixed: VectorField,
    pub phi_to_moving: VectorField,
    pub seed: u64,
}

fn lattice_shift(seed: u64) -> [f64; 3] {
    let mut rng = rng_from(derive_seed(seed, 0x5417));
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

/// Argmax over `channels` independent Perlin channels; ties go to the lowest
/// channel index.
pub fn multi_channel_labels(shape: Shape3, channels: u16, seed: u64) -> Result<LabelVolume> {
    let cfg = PairConfig { channels, ..PairConfig::default() };
    labels_with(shape, &cfg.label_perlin(seed), channels)
}

pub(crate) fn labels_with(shape: Shape3, perlin: &PerlinConfig, channels: u16) -> Result<LabelVolume> {
    if channels < 2 {
        return Err(Error::InvalidConfig("need at least 2 label channels".into()));
    }
    let n = shape.len();
    let mut best = vec![f32::NEG_INFINITY; n];
    let mut label = vec![0u16; n];
    for c in 0..channels {
        let seed = derive_seed(perlin.seed, c as u64);
        let ch = perlin::perlin3_shifted(shape, &perlin.with_seed(seed), lattice_shift(seed))?;
        for (i, &v) in ch.data().iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                label[i] = c;
            }
        }
    }
    LabelVolume::from_vec(shape, label, channels)
}

/// Paints each label with one intensity drawn uniformly from [0, 1).
pub fn assign_intensities(labels: &LabelVolume, seed: u64) -> ScalarVolume {
    let mut rng = rng_from(seed);
    let palette: Vec<f32> = (0..labels.label_count()).map(|_| rng.random::<f32>()).collect();
    let data = labels.data().iter().map(|&l| palette[l as usize]).collect();
    ScalarVolume::from_vec(labels.shape(), data).expect("label shape")
}

/// Three independent Perlin channels scaled so the largest component
/// magnitude equals `amplitude` voxels.
pub fn random_svf(shape: Shape3, amplitude: f64, frequency: u32, seed: u64) -> Result<VectorField> {
    let cfg = PerlinConfig { base_frequency: frequency, ..PerlinConfig::default() };
    let mut data = Vec::with_capacity(3 * shape.len());
    for c in 0..3 {
        let s = derive_seed(seed, c);
        data.extend_from_slice(perlin::perlin3_shifted(shape, &cfg.with_seed(s), lattice_shift(s))?.data());
    }
    let mut v = VectorField::from_vec(shape, data, FieldKind::Velocity)?;
    let peak = v.max_abs() as f64;
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    v.scale(scale as f32);
    Ok(v)
}

/// One random image deformed by two independent random diffeomorphisms.
pub fn make_pair(cfg: &PairConfig, seed: u64) -> Result<TrainingPair> {
    cfg.validate()?;
    let shape = cfg.shape;
    let labels = labels_with(shape, &cfg.label_perlin(derive_seed(seed, 0)), cfg.channels)?;
    let intensity_seed = match cfg.intensity_policy {
        IntensityPolicy::PerPair => derive_seed(seed, 1),
        IntensityPolicy::Fixed(s) => s,
    };
    let image = assign_intensities(&labels, intensity_seed);
    let ss = SsConfig::new(cfg.ss_steps)?;
    let v_a = random_svf(shape, cfg.svf_amplitude, cfg.svf_frequency, derive_seed(seed, 2))?;
    let v_b = random_svf(shape, cfg.svf_amplitude, cfg.svf_frequency, derive_seed(seed, 3))?;
    let phi_a = scaling_and_squaring(&v_a, ss);
    let phi_b = scaling_and_squaring(&v_b, ss);
    let fixed = warp_scalar(&image, &phi_a)?;
    let moving = warp_scalar(&image, &phi_b)?;
    let (fixed_labels, moving_labels) = if cfg.emit_labels {
        (Some(warp_labels(&labels, &phi_a)?), Some(warp_labels(&labels, &phi_b)?))
    } else {
        (None, None)
    };
    Ok(TrainingPair { fixed, moving, fixed_labels, moving_labels, phi_to_fixed: phi_a, phi_to_moving: phi_b, seed })
}

/// Endless, restartable stream of pairs; pair `i` uses seed
/// `derive_seed(base_seed, i)`.
#[derive(Debug, Clone)]
pub struct PairStream {
    cfg: PairConfig,
    base_seed: u64,
    next: u64,
}

impl PairStream {
    pub fn new(cfg: PairConfig, base_seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(PairStream { cfg, base_seed, next: 0 })
    }

    pub fn seed_of(&self, index: u64) -> u64 {
        derive_seed(self.base_seed, index)
    }

    pub fn pair_at(&self, index: u64) -> TrainingPair {
        make_pair(&self.cfg, self.seed_of(index)).expect("config validated at construction")
    }

    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }

    /// Generates pairs on a background thread into a bounded queue. Item `i`
    /// is identical to `pair_at(start + i)` regardless of scheduling.
    pub fn prefetch(self, capacity: usize) -> Prefetch {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for p in self {
                if tx.send(p).is_err() {
                    break;
                }
            }
        });
        Prefetch { rx: Some(rx), handle: Some(handle) }
    }
}

impl Iterator for PairStream {
    type Item = TrainingPair;

    fn next(&mut self) -> Option<TrainingPair> {
        let p = self.pair_at(self.next);
        self.next += 1;
        Some(p)
    }
}

pub fn pair_stream(cfg: PairConfig, base_seed: u64) -> Result<PairStream> {
    PairStream::new(cfg, base_seed)
}

/// Receiving end of [`PairStream::prefetch`].
pub struct Prefetch {
    rx: Option<Receiver<TrainingPair>>,
    handle: Option<JoinHandle<()>>,
}

impl Iterator for Prefetch {
    type Item = TrainingPair;

    fn next(&mut self) -> Option<TrainingPair> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetch {
    fn drop(&mut self) {
        // closing the receiver unblocks the producer
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PairConfig {
        PairConfig { shape: Shape3::cube(16).unwrap(), channels: 6, ..PairConfig::default() }
    }

    #[test]
    fn labels_in_range_and_degenerate_case() {
        let s = Shape3::cube(12).unwrap();
        let l = multi_channel_labels(s, 5, 1).unwrap();
        assert!(l.data().iter().all(|&v| v < 5));
        assert!(multi_channel_labels(s, 1, 1).is_err());
    }

    #[test]
    fn intensities_constant_per_label() {
        let s = Shape3::cube(10).unwrap();
        let l = multi_channel_labels(s, 4, 9).unwrap();
        let img = assign_intensities(&l, 3);
        let mut seen = [None; 4];
        for (&lab, &v) in l.data().iter().zip(img.data()) {
            match seen[lab as usize] {
                None => seen[lab as usize] = Some(v),
                Some(p) => assert_eq!(p, v),
            }
            assert!((0.0..1.0).contains(&v));
        }
        let single = LabelVolume::filled(s, 0, 1).unwrap();
        let flat = assign_intensities(&single, 5);
        assert!(flat.data().iter().all(|&v| v == flat.data()[0]));
    }

    #[test]
    fn svf_amplitude_scaling() {
        let s = Shape3::cube(12).unwrap();
        let v = random_svf(s, 2.5, 3, 4).unwrap();
        assert!((v.max_abs() - 2.5).abs() < 1e-6);
        let z = random_svf(s, 0.0, 3, 4).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_amplitude_pair_is_identical() {
        let cfg = PairConfig { svf_amplitude: 0.0, ..small() };
        let p = make_pair(&cfg, 7).unwrap();
        assert_eq!(p.fixed.data(), p.moving.data());
    }

    #[test]
    fn pair_is_deterministic() {
        let cfg = small();
        assert_eq!(make_pair(&cfg, 5).unwrap(), make_pair(&cfg, 5).unwrap());
        assert_ne!(make_pair(&cfg, 5).unwrap().fixed, make_pair(&cfg, 6).unwrap().fixed);
    }

    #[test]
    fn stream_restartable_and_prefetch_matches() {
        let cfg = PairConfig { emit_labels: false, ..small() };
        let a: Vec<_> = pair_stream(cfg, 3).unwrap().take(3).collect();
        let b: Vec<_> = pair_stream(cfg, 3).unwrap().prefetch(2).take(3).collect();
        assert_eq!(a, b);
        let mut s = pair_stream(cfg, 3).unwrap();
        s.seek(2);
        assert_eq!(s.next().unwrap(), a[2]);
    }

    #[test]
    fn bad_pair_config() {
        assert!(make_pair(&PairConfig { channels: 1, ..small() }, 0).is_err());
        assert!(make_pair(&PairConfig { svf_amplitude: -1.0, ..small() }, 0).is_err());
        assert!(make_pair(&PairConfig { ss_steps: 20, ..small() }, 0).is_err());
    }
}
