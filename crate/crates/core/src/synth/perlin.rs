//! Classic 3D gradient noise on an integer lattice.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::volume::{ScalarVolume, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerlinConfig {
    /// Lattice cells spanning each axis at the first octave.
    pub base_frequency: u32,
    pub octaves: u32,
    /// Amplitude ratio between consecutive octaves.
    pub persistence: f64,
    pub seed: u64,
}

impl Default for PerlinConfig {
    fn default() -> Self {
        PerlinConfig { base_frequency: 4, octaves: 1, persistence: 0.5, seed: 0 }
    }
}

impl PerlinConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_frequency < 1 {
            return Err(Error::InvalidConfig("Perlin base_frequency must be >= 1".into()));
        }
        if self.octaves < 1 {
            return Err(Error::InvalidConfig("Perlin octaves must be >= 1".into()));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(Error::InvalidConfig("Perlin persistence must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

// cube edge midpoints, normalised to unit length at use
const GRADIENTS: [[f64; 3]; 12] = [
    [1.0, 1.0, 0.0],
    [-1.0, 1.0, 0.0],
    [1.0, -1.0, 0.0],
    [-1.0, -1.0, 0.0],
    [1.0, 0.0, 1.0],
    [-1.0, 0.0, 1.0],
    [1.0, 0.0, -1.0],
    [-1.0, 0.0, -1.0],
    [0.0, 1.0, 1.0],
    [0.0, -1.0, 1.0],
    [0.0, 1.0, -1.0],
    [0.0, -1.0, -1.0],
];

/// Lattice hash: a seeded permutation of 0..256, doubled to avoid wrapping.
struct Lattice {
    perm: [u8; 512],
}

impl Lattice {
    fn new(seed: u64) -> Self {
        let mut p: Vec<u8> = (0..=255u8).collect();
        p.shuffle(&mut rng_from(seed));
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        Lattice { perm }
    }

    #[inline]
    fn gradient(&self, x: i64, y: i64, z: i64) -> [f64; 3] {
        let p = &self.perm;
        let h = p[p[p[(x & 255) as usize] as usize + (y & 255) as usize] as usize + (z & 255) as usize];
        let g = GRADIENTS[h as usize % 12];
        [g[0] * SQRT_HALF, g[1] * SQRT_HALF, g[2] * SQRT_HALF]
    }

    fn noise(&self, x: f64, y: f64, z: f64) -> f64 {
        let (xi, yi, zi) = (x.floor(), y.floor(), z.floor());
        let (fx, fy, fz) = (x - xi, y - yi, z - zi);
        let (xi, yi, zi) = (xi as i64, yi as i64, zi as i64);
        let dot = |dx: i64, dy: i64, dz: i64| {
            let g = self.gradient(xi + dx, yi + dy, zi + dz);
            g[0] * (fx - dx as f64) + g[1] * (fy - dy as f64) + g[2] * (fz - dz as f64)
        };
        let (u, v, w) = (fade(fx), fade(fy), fade(fz));
        let x00 = lerp(dot(0, 0, 0), dot(1, 0, 0), u);
        let x10 = lerp(dot(0, 1, 0), dot(1, 1, 0), u);
        let x01 = lerp(dot(0, 0, 1), dot(1, 0, 1), u);
        let x11 = lerp(dot(0, 1, 1), dot(1, 1, 1), u);
        lerp(lerp(x00, x10, v), lerp(x01, x11, v), w)
    }
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Gradient noise sampled at voxel centres; octave sums are divided by the
/// total amplitude so values stay within [-1, 1].
pub fn perlin3(shape: Shape3, cfg: &PerlinConfig) -> Result<ScalarVolume> {
    perlin3_shifted(shape, cfg, [0.0; 3])
}

/// As [`perlin3`] with the lattice translated by `shift` cells, so that
/// independent channels do not share lattice zeros.
pub(crate) fn perlin3_shifted(shape: Shape3, cfg: &PerlinConfig, shift: [f64; 3]) -> Result<ScalarVolume> {
    cfg.validate()?;
    let dims = shape.dims();
    let lattices: Vec<Lattice> = (0..cfg.octaves).map(|o| Lattice::new(derive_seed(cfg.seed, o as u64))).collect();
    let mut amp = 1.0;
    let mut amps = Vec::with_capacity(cfg.octaves as usize);
    for _ in 0..cfg.octaves {
        amps.push(amp);
        amp *= cfg.persistence;
    }
    let total: f64 = amps.iter().sum();
    let data = shape
        .iter()
        .map(|c| {
            let mut v = 0.0;
            for (o, lat) in lattices.iter().enumerate() {
                let freq = cfg.base_frequency as f64 * (1u64 << o) as f64;
                let p = |a: usize| c[a] as f64 * freq / dims[a] as f64 + shift[a];
                v += amps[o] * lat.noise(p(0), p(1), p(2));
            }
            (v / total) as f32
        })
        .collect();
    ScalarVolume::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_at_lattice_points() {
        let s = Shape3::cube(16).unwrap();
        let v = perlin3(s, &PerlinConfig::default().with_seed(3)).unwrap();
        // frequency 4 over 16 voxels: lattice every 4 voxels
        for [i, j, k] in s.iter() {
            if i % 4 == 0 && j % 4 == 0 && k % 4 == 0 {
                assert_eq!(v.get(i, j, k), 0.0);
            }
        }
        assert!(v.std() > 0.0);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = Shape3::cube(8).unwrap();
        let cfg = PerlinConfig { octaves: 3, ..PerlinConfig::default() }.with_seed(11);
        let a = perlin3(s, &cfg).unwrap();
        let b = perlin3(s, &cfg).unwrap();
        assert_eq!(a, b);
        let c = perlin3(s, &cfg.with_seed(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs() {
        let s = Shape3::cube(4).unwrap();
        assert!(perlin3(s, &PerlinConfig { base_frequency: 0, ..Default::default() }).is_err());
        assert!(perlin3(s, &PerlinConfig { octaves: 0, ..Default::default() }).is_err());
        assert!(perlin3(s, &PerlinConfig { persistence: 1.5, ..Default::default() }).is_err());
    }
}
