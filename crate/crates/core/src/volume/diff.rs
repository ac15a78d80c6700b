use super::{ScalarVolume, Shape3, VectorField};
use crate::real::Real;

/// Nine planes `d u_c / d x_d`, stored at index `3 * c + d`.
#[derive(Debug, Clone)]
pub struct GradientField<T: Real> {
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl<T: Real> GradientField<T> {
    pub fn plane(&self, c: usize, d: usize) -> &[T] {
        let n = self.shape.len();
        let o = (3 * c + d) * n;
        &self.data[o..o + n]
    }
}

/// Forward differences of each component along each axis; the derivative on
/// the last plane of an axis is zero.
pub fn spatial_gradient<T: Real>(u: &VectorField<T>) -> GradientField<T> {
    let shape = u.shape();
    let n = shape.len();
    let dims = shape.dims();
    let strides = shape.strides();
    let mut data = vec![T::zero(); 9 * n];
    for c in 0..3 {
        let src = u.component(c);
        for d in 0..3 {
            let out = &mut data[(3 * c + d) * n..(3 * c + d + 1) * n];
            let s = strides[d];
            for (idx, coord) in shape.iter().enumerate() {
                if coord[d] + 1 < dims[d] {
                    out[idx] = src[idx + s] - src[idx];
                }
            }
        }
    }
    GradientField { shape, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffDir {
    Forward,
    Backward,
}

/// Finite-difference scheme for Jacobian determinants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianScheme {
    /// Central differences, one-sided on the faces.
    Central,
    /// One forward-or-backward choice per axis; falls back to the other side
    /// on the face where the chosen stencil does not exist.
    OneSided([DiffDir; 3]),
}

impl JacobianScheme {
    /// The eight forward/backward combinations.
    pub fn all_one_sided() -> [JacobianScheme; 8] {
        use DiffDir::*;
        let mut out = [JacobianScheme::Central; 8];
        for (m, slot) in out.iter_mut().enumerate() {
            let pick = |bit: usize| if m >> bit & 1 == 0 { Forward } else { Backward };
            *slot = JacobianScheme::OneSided([pick(0), pick(1), pick(2)]);
        }
        out
    }
}

/// Derivative of `src` along axis `d` at `idx` under `scheme`.
#[inline]
pub(crate) fn axis_derivative<T: Real>(
    src: &[T],
    idx: usize,
    coord: usize,
    len: usize,
    stride: usize,
    dir: Option<DiffDir>,
) -> T {
    let has_next = coord + 1 < len;
    let has_prev = coord > 0;
    match dir {
        None => match (has_prev, has_next) {
            (true, true) => (src[idx + stride] - src[idx - stride]) * T::of(0.5),
            (false, true) => src[idx + stride] - src[idx],
            (true, false) => src[idx] - src[idx - stride],
            (false, false) => T::zero(),
        },
        Some(DiffDir::Forward) => {
            if has_next {
                src[idx + stride] - src[idx]
            } else {
                src[idx] - src[idx - stride]
            }
        }
        Some(DiffDir::Backward) => {
            if has_prev {
                src[idx] - src[idx - stride]
            } else {
                src[idx + stride] - src[idx]
            }
        }
    }
}

#[inline]
pub(crate) fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Jacobian matrix `d phi_c / d x_d` at one voxel.
#[inline]
pub(crate) fn jacobian_at<T: Real>(
    phi: &VectorField<T>,
    idx: usize,
    coord: [usize; 3],
    scheme: JacobianScheme,
) -> [[f64; 3]; 3] {
    let shape = phi.shape();
    let dims = shape.dims();
    let strides = shape.strides();
    let mut m = [[0.0; 3]; 3];
    for (c, row) in m.iter_mut().enumerate() {
        let src = phi.component(c);
        for d in 0..3 {
            let dir = match scheme {
                JacobianScheme::Central => None,
                JacobianScheme::OneSided(dirs) => Some(dirs[d]),
            };
            row[d] = axis_derivative(src, idx, coord[d], dims[d], strides[d], dir).f64();
        }
    }
    m
}

/// Determinant of the finite-difference Jacobian of a deformation at every voxel.
pub fn jacobian_determinants<T: Real>(phi: &VectorField<T>, scheme: JacobianScheme) -> ScalarVolume<f64> {
    let shape = phi.shape();
    let data = shape.iter().enumerate().map(|(idx, c)| det3(jacobian_at(phi, idx, c, scheme))).collect();
    ScalarVolume::from_vec(shape, data).expect("length matches shape")
}
