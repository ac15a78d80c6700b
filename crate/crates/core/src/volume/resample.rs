//! Separable trilinear resampling with aligned corners: voxel 0 maps to
//! voxel 0 and voxel `n-1` to voxel `m-1` on every axis.

use crate::real::Real;

fn taps<T: Real>(src_len: usize, dst_len: usize) -> Vec<(usize, usize, T)> {
    (0..dst_len)
        .map(|i| {
            if src_len == 1 {
                return (0, 0, T::zero());
            }
            let pos = if dst_len == 1 { 0.0 } else { i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64 };
            let i0 = (pos.floor() as usize).min(src_len - 2);
            (i0, i0 + 1, T::of(pos - i0 as f64))
        })
        .collect()
}

fn lerp_axis<T: Real>(src: &[T], channels: usize, dims: [usize; 3], axis: usize, len: usize) -> Vec<T> {
    let mut out_dims = dims;
    out_dims[axis] = len;
    let taps = taps::<T>(dims[axis], len);
    let n_out: usize = out_dims.iter().product();
    let n_in: usize = dims.iter().product();
    let mut out = vec![T::zero(); channels * n_out];
    let in_stride = [1, dims[0], dims[0] * dims[1]][axis];
    for c in 0..channels {
        let s = &src[c * n_in..(c + 1) * n_in];
        let o = &mut out[c * n_out..(c + 1) * n_out];
        for k in 0..out_dims[2] {
            for j in 0..out_dims[1] {
                for i in 0..out_dims[0] {
                    let oc = [i, j, k];
                    let (i0, i1, t) = taps[oc[axis]];
                    let mut ic = oc;
                    ic[axis] = 0;
                    let base = ic[0] + dims[0] * (ic[1] + dims[1] * ic[2]);
                    let a = s[base + i0 * in_stride];
                    let b = s[base + i1 * in_stride];
                    let oidx = i + out_dims[0] * (j + out_dims[1] * k);
                    o[oidx] = a * (T::one() - t) + b * t;
                }
            }
        }
    }
    out
}

fn lerp_axis_adjoint<T: Real>(grad: &[T], channels: usize, dims: [usize; 3], axis: usize, len: usize) -> Vec<T> {
    let mut out_dims = dims;
    out_dims[axis] = len;
    let taps = taps::<T>(dims[axis], len);
    let n_out: usize = out_dims.iter().product();
    let n_in: usize = dims.iter().product();
    let mut gin = vec![T::zero(); channels * n_in];
    let in_stride = [1, dims[0], dims[0] * dims[1]][axis];
    for c in 0..channels {
        let g = &grad[c * n_out..(c + 1) * n_out];
        let gi = &mut gin[c * n_in..(c + 1) * n_in];
        for k in 0..out_dims[2] {
            for j in 0..out_dims[1] {
                for i in 0..out_dims[0] {
                    let oc = [i, j, k];
                    let (i0, i1, t) = taps[oc[axis]];
                    let mut ic = oc;
                    ic[axis] = 0;
                    let base = ic[0] + dims[0] * (ic[1] + dims[1] * ic[2]);
                    let gv = g[i + out_dims[0] * (j + out_dims[1] * k)];
                    gi[base + i0 * in_stride] += gv * (T::one() - t);
                    gi[base + i1 * in_stride] += gv * t;
                }
            }
        }
    }
    gin
}

/// Resamples `channels` stacked planes from `src` dims to `dst` dims.
pub fn resample_channels<T: Real>(data: &[T], channels: usize, src: [usize; 3], dst: [usize; 3]) -> Vec<T> {
    let mut cur = data.to_vec();
    let mut dims = src;
    for axis in 0..3 {
        if dims[axis] != dst[axis] {
            cur = lerp_axis(&cur, channels, dims, axis, dst[axis]);
            dims[axis] = dst[axis];
        }
    }
    cur
}

/// Adjoint of [`resample_channels`]: maps a gradient on `dst` back to `src`.
pub fn resample_channels_adjoint<T: Real>(grad: &[T], channels: usize, src: [usize; 3], dst: [usize; 3]) -> Vec<T> {
    // forward applied axes 0,1,2 in turn; intermediate dims after each axis
    let mut stages = [src; 4];
    for axis in 0..3 {
        stages[axis + 1] = stages[axis];
        stages[axis + 1][axis] = dst[axis];
    }
    let mut cur = grad.to_vec();
    for axis in (0..3).rev() {
        if src[axis] != dst[axis] {
            cur = lerp_axis_adjoint(&cur, channels, stages[axis], axis, dst[axis]);
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved() {
        let src = vec![2.5f64; 3 * 4 * 5];
        let out = resample_channels(&src, 1, [3, 4, 5], [7, 2, 9]);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn corners_align_and_doubling_maps_even_voxels() {
        let dims = [4, 4, 4];
        let src: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let out = resample_channels(&src, 1, dims, [7, 7, 7]);
        // (n-1)/(m-1) = 1/2: even output voxels land on input voxels
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let o = out[2 * i + 7 * (2 * j + 7 * 2 * k)];
                    assert!((o - src[i + 4 * (j + 4 * k)]).abs() < 1e-12);
                }
            }
        }
        let down = resample_channels(&src, 1, dims, [2, 2, 2]);
        assert_eq!(down[0], src[0]);
        assert_eq!(down[7], src[63]);
    }

    #[test]
    fn adjoint_identity() {
        // <R x, y> == <x, R^T y>
        let src_dims = [3, 4, 2];
        let dst_dims = [5, 2, 6];
        let x: Vec<f64> = (0..2 * 24).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let y: Vec<f64> = (0..2 * 60).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
        let rx = resample_channels(&x, 2, src_dims, dst_dims);
        let rty = resample_channels_adjoint(&y, 2, src_dims, dst_dims);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&rty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
