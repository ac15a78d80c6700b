//! Dense multi-channel feature maps and the layer kernels of the network,
//! each with its exact adjoint.

use crate::real::Real;
use crate::volume::{resample_channels, resample_channels_adjoint};

/// `channels` planes of `dims` voxels, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor { channels, dims, data: vec![T::zero(); channels * dims.iter().product::<usize>()] }
    }

    pub fn from_planes(dims: [usize; 3], planes: &[&[T]]) -> Self {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n * planes.len());
        for p in planes {
            assert_eq!(p.len(), n, "plane length");
            data.extend_from_slice(p);
        }
        Tensor { channels: planes.len(), dims, data }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Self {
        let n = self.voxels();
        Tensor { channels: count, dims: self.dims, data: self.data[start * n..(start + count) * n].to_vec() }
    }

    pub fn concat(&self, other: &Tensor<T>) -> Self {
        assert_eq!(self.dims, other.dims, "concat dims");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor { channels: self.channels + other.channels, dims: self.dims, data }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn resample(&self, dims: [usize; 3]) -> Self {
        if dims == self.dims {
            return self.clone();
        }
        Tensor { channels: self.channels, dims, data: resample_channels(&self.data, self.channels, self.dims, dims) }
    }

    /// Adjoint of `src.resample(self.dims)`: maps this gradient back to `src_dims`.
    pub fn resample_adjoint(&self, src_dims: [usize; 3]) -> Self {
        if src_dims == self.dims {
            return self.clone();
        }
        Tensor {
            channels: self.channels,
            dims: src_dims,
            data: resample_channels_adjoint(&self.data, self.channels, src_dims, self.dims),
        }
    }
}

/// Location of a 3x3x3 convolution's parameters in the flat parameter vector.
/// Weights are laid out `[cout][cin][kz][ky][kx]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 27
    }
}

#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo, hi.max(lo))
}

#[inline]
fn axpy<T: Real>(out: &mut [T], w: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += w * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    acc.iter().fold(s, |t, &v| t + v)
}

/// Same-size 3x3x3 convolution with zero padding.
pub fn conv3d<T: Real>(x: &Tensor<T>, params: &[T], spec: ConvSpec) -> Tensor<T> {
    assert_eq!(x.channels, spec.cin, "conv input channels");
    let [nx, ny, nz] = x.dims;
    let n = x.voxels();
    let mut out = Tensor::zeros(spec.cout, x.dims);
    let w = &params[spec.weight..spec.weight + spec.weight_len()];
    for co in 0..spec.cout {
        let b = params[spec.bias + co];
        let o = &mut out.data[co * n..(co + 1) * n];
        o.iter_mut().for_each(|v| *v = b);
        for ci in 0..spec.cin {
            let inp = &x.data[ci * n..(ci + 1) * n];
            let wk = &w[(co * spec.cin + ci) * 27..(co * spec.cin + ci + 1) * 27];
            for kz in 0..3 {
                let dz = kz as isize - 1;
                let (z0, z1) = span(dz, nz);
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, ny);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, nx);
                        let wv = wk[kz * 9 + ky * 3 + kx];
                        if x0 >= x1 || wv == T::zero() {
                            continue;
                        }
                        let xs = (x0 as isize + dx) as usize;
                        for z in z0..z1 {
                            let zi = (z as isize + dz) as usize;
                            for y in y0..y1 {
                                let yi = (y as isize + dy) as usize;
                                let orow = (z * ny + y) * nx;
                                let irow = (zi * ny + yi) * nx;
                                axpy(&mut o[orow + x0..orow + x1], wv, &inp[irow + xs..irow + xs + (x1 - x0)]);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv3d`]. Accumulates parameter gradients into `grads` and
/// returns the gradient with respect to the input.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    params: &[T],
    spec: ConvSpec,
    grads: &mut [T],
    need_input_grad: bool,
) -> Tensor<T> {
    let [nx, ny, nz] = x.dims;
    let n = x.voxels();
    let mut gin = Tensor::zeros(if need_input_grad { spec.cin } else { 0 }, x.dims);
    let w = &params[spec.weight..spec.weight + spec.weight_len()];
    for co in 0..spec.cout {
        let go = &grad_out.data[co * n..(co + 1) * n];
        grads[spec.bias + co] += T::of(go.iter().map(|v| v.f64()).sum::<f64>());
        for ci in 0..spec.cin {
            let inp = &x.data[ci * n..(ci + 1) * n];
            let base = (co * spec.cin + ci) * 27;
            for kz in 0..3 {
                let dz = kz as isize - 1;
                let (z0, z1) = span(dz, nz);
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, ny);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, nx);
                        if x0 >= x1 {
                            continue;
                        }
                        let k = kz * 9 + ky * 3 + kx;
                        let wv = w[base + k];
                        let xs = (x0 as isize + dx) as usize;
                        let len = x1 - x0;
                        let mut acc = 0.0f64;
                        for z in z0..z1 {
                            let zi = (z as isize + dz) as usize;
                            for y in y0..y1 {
                                let yi = (y as isize + dy) as usize;
                                let orow = (z * ny + y) * nx + x0;
                                let irow = (zi * ny + yi) * nx + xs;
                                acc += dot(&go[orow..orow + len], &inp[irow..irow + len]).f64();
                                if need_input_grad {
                                    let gi = &mut gin.data[ci * n..(ci + 1) * n];
                                    axpy(&mut gi[irow..irow + len], wv, &go[orow..orow + len]);
                                }
                            }
                        }
                        grads[spec.weight + base + k] += T::of(acc);
                    }
                }
            }
        }
    }
    gin
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let s = T::of(LEAKY_SLOPE);
    Tensor {
        channels: z.channels,
        dims: z.dims,
        data: z.data.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect(),
    }
}

pub fn leaky_relu_backward<T: Real>(z: &Tensor<T>, grad: &mut Tensor<T>) {
    let s = T::of(LEAKY_SLOPE);
    for (g, &v) in grad.data.iter_mut().zip(&z.data) {
        if v <= T::zero() {
            *g *= s;
        }
    }
}

/// 2x2x2 average pooling; every axis must be even.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [nx, ny, nz] = x.dims;
    assert!(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0, "pooling needs even dims, got {:?}", x.dims);
    let od = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(x.channels, od);
    let eighth = T::of(0.125);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    let mut s = T::zero();
                    for (a, b, d) in CUBE {
                        s += src[(2 * i + a) + nx * ((2 * j + b) + ny * (2 * k + d))];
                    }
                    dst[i + od[0] * (j + od[1] * k)] = s * eighth;
                }
            }
        }
    }
    out
}

const CUBE: [(usize, usize, usize); 8] =
    [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)];

pub fn avg_pool2_backward<T: Real>(grad: &Tensor<T>, in_dims: [usize; 3]) -> Tensor<T> {
    let [nx, ny, _] = in_dims;
    let od = grad.dims;
    let mut gin = Tensor::zeros(grad.channels, in_dims);
    let eighth = T::of(0.125);
    for c in 0..grad.channels {
        let g = grad.plane(c);
        let dst = gin.plane_mut(c);
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    let v = g[i + od[0] * (j + od[1] * k)] * eighth;
                    for (a, b, d) in CUBE {
                        dst[(2 * i + a) + nx * ((2 * j + b) + ny * (2 * k + d))] += v;
                    }
                }
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, len: usize) -> Vec<f64> {
        let mut x = seed;
        (0..len)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    fn naive_conv(x: &Tensor<f64>, p: &[f64], s: ConvSpec) -> Tensor<f64> {
        let [nx, ny, nz] = x.dims;
        let mut out = Tensor::zeros(s.cout, x.dims);
        for co in 0..s.cout {
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let mut acc = p[s.bias + co];
                        for ci in 0..s.cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (a, b, c) = (i + kx, j + ky, k + kz);
                                        if a < 1 || b < 1 || c < 1 || a > nx || b > ny || c > nz {
                                            continue;
                                        }
                                        let w = p[s.weight + (co * s.cin + ci) * 27 + kz * 9 + ky * 3 + kx];
                                        acc += w * x.plane(ci)[(a - 1) + nx * ((b - 1) + ny * (c - 1))];
                                    }
                                }
                            }
                        }
                        out.plane_mut(co)[i + nx * (j + ny * k)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let spec = ConvSpec { cin: 2, cout: 3, weight: 0, bias: 2 * 3 * 27 };
        let params = lcg(1, spec.bias + 3);
        let x = Tensor { channels: 2, dims: [4, 3, 5], data: lcg(2, 2 * 60) };
        let a = conv3d(&x, &params, spec);
        let b = naive_conv(&x, &params, spec);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let spec = ConvSpec { cin: 2, cout: 2, weight: 0, bias: 2 * 2 * 27 };
        let params = lcg(3, spec.bias + 2);
        let x = Tensor { channels: 2, dims: [3, 4, 2], data: lcg(4, 48) };
        let g = Tensor { channels: 2, dims: [3, 4, 2], data: lcg(5, 48) };
        let mut grads = vec![0.0; params.len()];
        let gin = conv3d_backward(&x, &g, &params, spec, &mut grads, true);
        let f = |p: &[f64], xx: &Tensor<f64>| -> f64 {
            conv3d(xx, p, spec).data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in [0, 13, 60, 107, spec.bias, spec.bias + 1] {
            let mut pp = params.clone();
            pp[i] += h;
            let mut pm = params.clone();
            pm[i] -= h;
            let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-6, "param {i}");
        }
        for i in [0, 7, 30, 47] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (f(&params, &xp) - f(&params, &xm)) / (2.0 * h);
            assert!((fd - gin.data[i]).abs() < 1e-6, "input {i}");
        }
    }

    #[test]
    fn pool_adjoint() {
        let x = Tensor { channels: 2, dims: [4, 2, 6], data: lcg(7, 96) };
        let g = Tensor { channels: 2, dims: [2, 1, 3], data: lcg(8, 12) };
        let px = avg_pool2(&x);
        let gb = avg_pool2_backward(&g, x.dims);
        let lhs: f64 = px.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gb.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..19).map(|i| (i % 3) as f64).collect();
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(dot(&a, &b), expect);
    }
}
