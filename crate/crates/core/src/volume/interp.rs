use super::{FieldKind, LabelVolume, ScalarVolume, Shape3, VectorField};
use crate::error::Result;
use crate::real::Real;

/// Trilinear interpolation stencil for one sample point.
///
/// Coordinates outside `[0, n-1]` are clamped to the border; a clamped axis
/// has zero derivative with respect to the sample position.
#[derive(Debug, Clone, Copy)]
pub struct Stencil<T> {
    pub base: usize,
    pub step: [usize; 3],
    pub t: [T; 3],
    pub inside: [bool; 3],
}

#[inline(always)]
fn axis<T: Real>(p: T, n: usize) -> (usize, T, bool) {
    let max = T::of((n - 1) as f64);
    if p >= T::zero() && p <= max {
        let i0 = (p.floor().to_usize().unwrap_or(0)).min(n - 2);
        (i0, p - T::of(i0 as f64), true)
    } else if p > max {
        (n - 2, T::one(), false)
    } else {
        // below zero, or NaN
        (0, T::zero(), false)
    }
}

impl<T: Real> Stencil<T> {
    #[inline(always)]
    pub fn new(shape: Shape3, p: [T; 3]) -> Self {
        let (i, tx, ix) = axis(p[0], shape.nx);
        let (j, ty, iy) = axis(p[1], shape.ny);
        let (k, tz, iz) = axis(p[2], shape.nz);
        let step = shape.strides();
        Stencil { base: i + step[1] * j + step[2] * k, step, t: [tx, ty, tz], inside: [ix, iy, iz] }
    }

    #[inline(always)]
    fn corners(&self, d: &[T]) -> [T; 8] {
        let b = self.base;
        let [sx, sy, sz] = self.step;
        [d[b], d[b + sx], d[b + sy], d[b + sx + sy], d[b + sz], d[b + sx + sz], d[b + sy + sz], d[b + sx + sy + sz]]
    }

    #[inline(always)]
    pub fn sample(&self, d: &[T]) -> T {
        let v = self.corners(d);
        let [tx, ty, tz] = self.t;
        let (ux, uy, uz) = (T::one() - tx, T::one() - ty, T::one() - tz);
        let c00 = v[0] * ux + v[1] * tx;
        let c10 = v[2] * ux + v[3] * tx;
        let c01 = v[4] * ux + v[5] * tx;
        let c11 = v[6] * ux + v[7] * tx;
        let c0 = c00 * uy + c10 * ty;
        let c1 = c01 * uy + c11 * ty;
        c0 * uz + c1 * tz
    }

    /// Sample value and its derivative with respect to the sample position.
    #[inline(always)]
    pub fn sample_grad(&self, d: &[T]) -> (T, [T; 3]) {
        let v = self.corners(d);
        let [tx, ty, tz] = self.t;
        let (ux, uy, uz) = (T::one() - tx, T::one() - ty, T::one() - tz);
        let c00 = v[0] * ux + v[1] * tx;
        let c10 = v[2] * ux + v[3] * tx;
        let c01 = v[4] * ux + v[5] * tx;
        let c11 = v[6] * ux + v[7] * tx;
        let c0 = c00 * uy + c10 * ty;
        let c1 = c01 * uy + c11 * ty;
        let val = c0 * uz + c1 * tz;

        let zero = T::zero();
        let gx = if self.inside[0] {
            let d00 = v[1] - v[0];
            let d10 = v[3] - v[2];
            let d01 = v[5] - v[4];
            let d11 = v[7] - v[6];
            (d00 * uy + d10 * ty) * uz + (d01 * uy + d11 * ty) * tz
        } else {
            zero
        };
        let gy = if self.inside[1] { (c10 - c00) * uz + (c11 - c01) * tz } else { zero };
        let gz = if self.inside[2] { c1 - c0 } else { zero };
        (val, [gx, gy, gz])
    }

    /// Adds `g * weight` into each of the eight corners (adjoint of `sample`).
    #[inline(always)]
    pub fn scatter(&self, d: &mut [T], g: T) {
        let [tx, ty, tz] = self.t;
        let (ux, uy, uz) = (T::one() - tx, T::one() - ty, T::one() - tz);
        let b = self.base;
        let [sx, sy, sz] = self.step;
        let gz0 = g * uz;
        let gz1 = g * tz;
        let g00 = gz0 * uy;
        let g10 = gz0 * ty;
        let g01 = gz1 * uy;
        let g11 = gz1 * ty;
        d[b] += g00 * ux;
        d[b + sx] += g00 * tx;
        d[b + sy] += g10 * ux;
        d[b + sx + sy] += g10 * tx;
        d[b + sz] += g01 * ux;
        d[b + sx + sz] += g01 * tx;
        d[b + sy + sz] += g11 * ux;
        d[b + sx + sy + sz] += g11 * tx;
    }
}

/// Trilinear sample of `vol` at continuous voxel position `p`, border-replicated.
pub fn trilinear_sample<T: Real>(vol: &ScalarVolume<T>, p: [T; 3]) -> T {
    Stencil::new(vol.shape(), p).sample(vol.data())
}

/// Samples a displacement field at `p` (border-replicated per component).
pub fn sample_displacement<T: Real>(u: &VectorField<T>, p: [T; 3]) -> [T; 3] {
    let st = Stencil::new(u.shape(), p);
    [st.sample(u.component(0)), st.sample(u.component(1)), st.sample(u.component(2))]
}

/// `out(x) = m(phi(x))` with trilinear interpolation.
pub fn warp_scalar<T: Real>(m: &ScalarVolume<T>, phi: &VectorField<T>) -> Result<ScalarVolume<T>> {
    m.shape().ensure_same(&phi.shape())?;
    phi.ensure_kind(FieldKind::Deformation)?;
    let shape = m.shape();
    let n = shape.len();
    let pd = phi.data();
    let md = m.data();
    let out: Vec<T> =
        (0..n).map(|idx| Stencil::new(shape, [pd[idx], pd[n + idx], pd[2 * n + idx]]).sample(md)).collect();
    Ok(ScalarVolume::from_vec(shape, out)?.with_spacing(m.spacing))
}

/// Adjoint of [`warp_scalar`]: gradients with respect to the moving image and
/// the deformation, given the gradient of the warped output.
pub fn warp_scalar_vjp<T: Real>(
    m: &ScalarVolume<T>,
    phi: &VectorField<T>,
    grad_out: &[T],
) -> Result<(Vec<T>, VectorField<T>)> {
    m.shape().ensure_same(&phi.shape())?;
    let shape = m.shape();
    let n = shape.len();
    let pd = phi.data();
    let md = m.data();
    let mut gm = vec![T::zero(); n];
    let mut gphi = VectorField::zeros(shape, phi.kind());
    let gp = gphi.data_mut();
    for idx in 0..n {
        let g = grad_out[idx];
        if g == T::zero() {
            continue;
        }
        let st = Stencil::new(shape, [pd[idx], pd[n + idx], pd[2 * n + idx]]);
        let (_, d) = st.sample_grad(md);
        st.scatter(&mut gm, g);
        gp[idx] = g * d[0];
        gp[n + idx] = g * d[1];
        gp[2 * n + idx] = g * d[2];
    }
    Ok((gm, gphi))
}

/// Nearest-neighbour label warp; output labels are a subset of the input's.
pub fn warp_labels<T: Real>(l: &LabelVolume, phi: &VectorField<T>) -> Result<LabelVolume> {
    l.shape().ensure_same(&phi.shape())?;
    phi.ensure_kind(FieldKind::Deformation)?;
    let shape = l.shape();
    let n = shape.len();
    let dims = shape.dims();
    let pd = phi.data();
    let round = |p: T, a: usize| -> usize {
        let max = (dims[a] - 1) as f64;
        let v = p.f64();
        if v.is_nan() {
            return 0;
        }
        (v + 0.5).floor().clamp(0.0, max) as usize
    };
    let src = l.data();
    let out = (0..n)
        .map(|idx| {
            let i = round(pd[idx], 0);
            let j = round(pd[n + idx], 1);
            let k = round(pd[2 * n + idx], 2);
            src[shape.index(i, j, k)]
        })
        .collect();
    Ok(LabelVolume::from_vec(shape, out, l.label_count())?.with_spacing(l.spacing))
}

/// `result(x) = outer(inner(x))`.
///
/// The outer deformation is extended beyond the grid as identity plus its
/// border-replicated displacement, so translations compose exactly everywhere.
pub fn compose<T: Real>(outer: &VectorField<T>, inner: &VectorField<T>) -> Result<VectorField<T>> {
    outer.shape().ensure_same(&inner.shape())?;
    outer.ensure_kind(FieldKind::Deformation)?;
    inner.ensure_kind(FieldKind::Deformation)?;
    let shape = outer.shape();
    let u_out = outer.to_displacement()?;
    let u_in = inner.to_displacement()?;
    let composed = compose_displacements(u_out.data(), u_in.data(), shape);
    Ok(VectorField::from_vec(shape, composed, FieldKind::Displacement)?.to_deformation())
}

/// Displacement-space composition: `w(x) = b(x) + a(x + b(x))`.
pub(crate) fn compose_displacements<T: Real>(a: &[T], b: &[T], shape: Shape3) -> Vec<T> {
    let n = shape.len();
    let mut out = vec![T::zero(); 3 * n];
    let (ax, rest) = a.split_at(n);
    let (ay, az) = rest.split_at(n);
    for (idx, c) in shape.iter().enumerate() {
        let b0 = b[idx];
        let b1 = b[n + idx];
        let b2 = b[2 * n + idx];
        let p = [T::of(c[0] as f64) + b0, T::of(c[1] as f64) + b1, T::of(c[2] as f64) + b2];
        let st = Stencil::new(shape, p);
        out[idx] = b0 + st.sample(ax);
        out[n + idx] = b1 + st.sample(ay);
        out[2 * n + idx] = b2 + st.sample(az);
    }
    out
}

/// Adjoint of [`compose_displacements`]. Accumulates into `ga` and `gb`.
pub(crate) fn compose_displacements_vjp<T: Real>(a: &[T], b: &[T], shape: Shape3, g: &[T], ga: &mut [T], gb: &mut [T]) {
    let n = shape.len();
    let (ax, rest) = a.split_at(n);
    let (ay, az) = rest.split_at(n);
    for (idx, c) in shape.iter().enumerate() {
        let p = [T::of(c[0] as f64) + b[idx], T::of(c[1] as f64) + b[n + idx], T::of(c[2] as f64) + b[2 * n + idx]];
        let st = Stencil::new(shape, p);
        let g0 = g[idx];
        let g1 = g[n + idx];
        let g2 = g[2 * n + idx];
        let (_, d0) = st.sample_grad(ax);
        let (_, d1) = st.sample_grad(ay);
        let (_, d2) = st.sample_grad(az);
        {
            let (gax, rest) = ga.split_at_mut(n);
            let (gay, gaz) = rest.split_at_mut(n);
            st.scatter(gax, g0);
            st.scatter(gay, g1);
            st.scatter(gaz, g2);
        }
        for d in 0..3 {
            gb[d * n + idx] += g[d * n + idx] + g0 * d0[d] + g1 * d1[d] + g2 * d2[d];
        }
    }
}
