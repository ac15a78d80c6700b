//! Named parameter table over one flat vector.

use rand_distr::{Distribution, Normal};

use super::layers::{ConvSpec, LEAKY_SLOPE};
use crate::real::Real;
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry>,
    values: Vec<T>,
}

impl<T: Real> ParamStore<T> {
    pub(crate) fn new() -> Self {
        ParamStore { entries: Vec::new(), values: Vec::new() }
    }

    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.values.len();
        let e = ParamEntry { name, shape, offset };
        self.values.resize(offset + e.len(), T::zero());
        self.entries.push(e);
        offset
    }

    /// Registers `{prefix}.weight` and `{prefix}.bias` for a 3x3x3 convolution.
    pub(crate) fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvSpec {
        let weight = self.push(format!("{prefix}.weight"), vec![cout, cin, 3, 3, 3]);
        let bias = self.push(format!("{prefix}.bias"), vec![cout]);
        ConvSpec { cin, cout, weight, bias }
    }

    /// He-style normal weights scaled for the leaky rectifier, zero biases.
    /// Entries whose name contains `head` stay zero.
    pub(crate) fn initialize(&mut self, seed: u64) {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        for (i, e) in self.entries.iter().enumerate() {
            let r = e.range();
            if !e.name.ends_with(".weight") || e.name.contains("head") {
                self.values[r].iter_mut().for_each(|v| *v = T::zero());
                continue;
            }
            let fan_in: usize = e.shape[1..].iter().product();
            let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
            let mut rng = rng_from(derive_seed(seed, i as u64));
            for v in &mut self.values[r] {
                *v = T::of(normal.sample(&mut rng) as f32 as f64);
            }
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entry(name).map(|e| &self.values[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.entry(name)?.range();
        Some(&mut self.values[r])
    }
}
