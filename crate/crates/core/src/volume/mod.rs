//! Dense 3D grids and the geometric operations built on them.
//!
//! All coordinates are voxel indices. Data is stored x-fastest; vector fields
//! keep their three components as separate planes. Deformation fields hold
//! absolute sample positions (identity grid plus displacement).

pub(crate) mod diff;
pub(crate) mod interp;
mod resample;

pub use diff::{jacobian_determinants, spatial_gradient, DiffDir, GradientField, JacobianScheme};
pub use interp::{compose, sample_displacement, trilinear_sample, warp_labels, warp_scalar, warp_scalar_vjp, Stencil};
pub use resample::{resample_channels, resample_channels_adjoint};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Shape3 {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::InvalidShape([nx, ny, nz]));
        }
        Ok(Shape3 { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    pub fn from_dims(d: [usize; 3]) -> Result<Self> {
        Self::new(d[0], d[1], d[2])
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    /// Voxel coordinates of a flat index.
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        [i, j, k]
    }

    /// Flat-index strides per axis.
    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [1, self.nx, self.nx * self.ny]
    }

    pub fn ensure_same(&self, other: &Shape3) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch { left: self.dims(), right: other.dims() });
        }
        Ok(())
    }

    /// Iterates voxel coordinates in storage order.
    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| [i, j, k])))
    }

    /// True when the voxel is at least `margin` voxels from every face.
    pub fn is_interior(&self, c: [usize; 3], margin: usize) -> bool {
        let d = self.dims();
        (0..3).all(|a| c[a] >= margin && c[a] + margin < d[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume<T: Real = f32> {
    shape: Shape3,
    data: Vec<T>,
    /// Millimetres per voxel; only TRE and file headers consult it.
    pub spacing: [f64; 3],
}

impl<T: Real> ScalarVolume<T> {
    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape3, v: T) -> Self {
        ScalarVolume { shape, data: vec![v; shape.len()], spacing: [1.0; 3] }
    }

    pub fn from_vec(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch { expected: shape.len(), got: data.len() });
        }
        Ok(ScalarVolume { shape, data, spacing: [1.0; 3] })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let data = shape.iter().map(&mut f).collect();
        ScalarVolume { shape, data, spacing: [1.0; 3] }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.shape.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.shape.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ScalarVolume { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), spacing: self.spacing }
    }

    pub fn cast<U: Real>(&self) -> ScalarVolume<U> {
        ScalarVolume { shape: self.shape, data: crate::real::cast_slice(&self.data), spacing: self.spacing }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear resampling to `new_shape` with corner voxels aligned.
    pub fn resample(&self, new_shape: Shape3) -> Self {
        let data = resample_channels(&self.data, 1, self.shape.dims(), new_shape.dims());
        ScalarVolume { shape: new_shape, data, spacing: self.spacing }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Velocity,
    Displacement,
    Deformation,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Velocity => "velocity",
            FieldKind::Displacement => "displacement",
            FieldKind::Deformation => "deformation",
        }
    }
}

/// Three-component field stored as three planes (x, y, z components).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField<T: Real = f32> {
    shape: Shape3,
    data: Vec<T>,
    kind: FieldKind,
}

impl<T: Real> VectorField<T> {
    pub fn zeros(shape: Shape3, kind: FieldKind) -> Self {
        VectorField { shape, data: vec![T::zero(); 3 * shape.len()], kind }
    }

    pub fn from_vec(shape: Shape3, data: Vec<T>, kind: FieldKind) -> Result<Self> {
        if data.len() != 3 * shape.len() {
            return Err(Error::LengthMismatch { expected: 3 * shape.len(), got: data.len() });
        }
        Ok(VectorField { shape, data, kind })
    }

    pub fn from_fn(shape: Shape3, kind: FieldKind, mut f: impl FnMut([usize; 3]) -> [T; 3]) -> Self {
        let n = shape.len();
        let mut data = vec![T::zero(); 3 * n];
        for (idx, c) in shape.iter().enumerate() {
            let v = f(c);
            data[idx] = v[0];
            data[n + idx] = v[1];
            data[2 * n + idx] = v[2];
        }
        VectorField { shape, data, kind }
    }

    /// Voxel `(i, j, k)` maps to the point `(i, j, k)`.
    pub fn identity(shape: Shape3) -> Self {
        Self::from_fn(shape, FieldKind::Deformation, |[i, j, k]| [T::of(i as f64), T::of(j as f64), T::of(k as f64)])
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn component(&self, c: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn component_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [T; 3] {
        let n = self.shape.len();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        self.at(self.shape.index(i, j, k))
    }

    #[inline]
    pub fn set_at(&mut self, idx: usize, v: [T; 3]) {
        let n = self.shape.len();
        self.data[idx] = v[0];
        self.data[n + idx] = v[1];
        self.data[2 * n + idx] = v[2];
    }

    pub fn cast<U: Real>(&self) -> VectorField<U> {
        VectorField { shape: self.shape, data: crate::real::cast_slice(&self.data), kind: self.kind }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn ensure_kind(&self, kind: FieldKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongFieldKind { expected: kind.name(), got: self.kind.name() });
        }
        Ok(())
    }

    /// Deformation from a displacement field: `phi = id + u`.
    pub fn to_deformation(&self) -> Self {
        let mut out = self.clone();
        out.kind = FieldKind::Deformation;
        add_identity(&mut out.data, self.shape, T::one());
        out
    }

    /// Displacement from a deformation field: `u = phi - id`.
    pub fn to_displacement(&self) -> Result<Self> {
        self.ensure_kind(FieldKind::Deformation)?;
        let mut out = self.clone();
        out.kind = FieldKind::Displacement;
        add_identity(&mut out.data, self.shape, -T::one());
        Ok(out)
    }
}

/// Adds `sign * identity` to a three-plane buffer in place.
pub(crate) fn add_identity<T: Real>(data: &mut [T], shape: Shape3, sign: T) {
    let n = shape.len();
    let (nx, ny) = (shape.nx, shape.ny);
    for k in 0..shape.nz {
        let z = T::of(k as f64) * sign;
        for j in 0..ny {
            let y = T::of(j as f64) * sign;
            let row = nx * (j + ny * k);
            for i in 0..nx {
                let idx = row + i;
                data[idx] += T::of(i as f64) * sign;
                data[n + idx] += y;
                data[2 * n + idx] += z;
            }
        }
    }
}

pub fn identity_grid<T: Real>(shape: Shape3) -> VectorField<T> {
    VectorField::identity(shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    shape: Shape3,
    data: Vec<u16>,
    label_count: u16,
    pub spacing: [f64; 3],
}

impl LabelVolume {
    pub fn from_vec(shape: Shape3, data: Vec<u16>, label_count: u16) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch { expected: shape.len(), got: data.len() });
        }
        if let Some(&bad) = data.iter().find(|&&l| l >= label_count) {
            return Err(Error::InvalidConfig(format!("label {bad} outside [0, {label_count})")));
        }
        Ok(LabelVolume { shape, data, label_count, spacing: [1.0; 3] })
    }

    pub fn filled(shape: Shape3, label: u16, label_count: u16) -> Result<Self> {
        Self::from_vec(shape, vec![label; shape.len()], label_count)
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline]
    pub fn label_count(&self) -> u16 {
        self.label_count
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.data[self.shape.index(i, j, k)]
    }

    /// Labels that occur at least once, ascending.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; self.label_count as usize];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..self.label_count).filter(|&l| seen[l as usize]).collect()
    }

    /// One-hot probability planes, `label_count` channels.
    pub fn one_hot<T: Real>(&self) -> Vec<T> {
        let n = self.shape.len();
        let mut out = vec![T::zero(); n * self.label_count as usize];
        for (idx, &l) in self.data.iter().enumerate() {
            out[l as usize * n + idx] = T::one();
        }
        out
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }
}
