//! Layers with explicit backward passes.
//!
//! Every backward takes the forward input (or a cache), the upstream
//! gradient, and a gradient accumulator of the same type as the layer.
//! Gradients are accumulated, never overwritten, so a layer that runs several
//! times in a step (shared encoder, shared seghead) sums its contributions.

use rand::Rng;

use crate::tensor::{sigmoid, Map, Param};

/// Output indices `o` in `[lo, hi)` such that `o * stride + offset` lands in
/// `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let last = n_in as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        (last / s + 1).min(n_out as isize)
    };
    (lo as usize, hi.max(lo) as usize)
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four interleaved partial sums (fixed order, so still
/// deterministic) to let the compiler vectorize.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let c = a.chunks_exact(4);
    let tail: f64 = c.remainder().iter().sum();
    for x in c {
        for l in 0..4 {
            acc[l] += x[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    /// Uniform init scaled by fan-in; padding is always `kernel / 2`.
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let mut weight = Param::zeros(&[cout, cin, kernel, kernel]);
        for v in weight.data.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        let mut bias = Param::zeros(&[cout]);
        for v in bias.data.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        let mut conv = Conv2d {
            cin,
            cout,
            kernel,
            stride,
            weight,
            bias,
        };
        conv.round_to_f32();
        conv
    }

    /// A 1x1 projection initialised at the identity plus small noise.
    pub fn near_identity<R: Rng>(dim: usize, noise: f64, rng: &mut R) -> Self {
        let mut conv = Conv2d {
            cin: dim,
            cout: dim,
            kernel: 1,
            stride: 1,
            weight: Param::zeros(&[dim, dim, 1, 1]),
            bias: Param::zeros(&[dim]),
        };
        for o in 0..dim {
            for i in 0..dim {
                let base = if o == i { 1.0 } else { 0.0 };
                conv.weight.data[o * dim + i] = base + rng.gen_range(-noise..noise);
            }
        }
        conv.round_to_f32();
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            ..*self
        }
    }

    fn round_to_f32(&mut self) {
        self.weight.round_to_f32();
        self.bias.round_to_f32();
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = 2 * self.pad();
        (
            (h + p - self.kernel) / self.stride + 1,
            (w + p - self.kernel) / self.stride + 1,
        )
    }

    /// Unfold `x` into rows `(ci, ky, kx)` of length `oh * ow`, zero where
    /// the window falls in the padding.
    fn im2col(&self, x: &Map, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, pad) = (self.kernel, self.stride, self.pad() as isize);
        let n = oh * ow;
        let mut col = vec![0.0; self.cin * k * k * n];
        for ci in 0..self.cin {
            let inp = x.channel(ci);
            for ky in 0..k {
                let (ylo, yhi) = valid_range(oh, x.h, s, ky as isize - pad);
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                    let ox_off = kx as isize - pad;
                    let (xlo, xhi) = valid_range(ow, x.w, s, ox_off);
                    for oy in ylo..yhi {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        let row_in = iy as usize * x.w;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let start = (row_in as isize + xlo as isize + ox_off) as usize;
                            dst[xlo..xhi].copy_from_slice(&inp[start..start + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] = inp[row_in + ((ox * s) as isize + ox_off) as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Conv2d::im2col`]: scatter-add rows back onto a map.
    fn col2im(&self, col: &[f64], x_shape: (usize, usize, usize), oh: usize, ow: usize) -> Map {
        let (c, h, w) = x_shape;
        let (k, s, pad) = (self.kernel, self.stride, self.pad() as isize);
        let n = oh * ow;
        let mut gx = Map::zeros(c, h, w);
        for ci in 0..self.cin {
            let gin = gx.channel_mut(ci);
            for ky in 0..k {
                let (ylo, yhi) = valid_range(oh, h, s, ky as isize - pad);
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                    let ox_off = kx as isize - pad;
                    let (xlo, xhi) = valid_range(ow, w, s, ox_off);
                    for oy in ylo..yhi {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        let row_in = iy as usize * w;
                        let src = &row[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let start = (row_in as isize + xlo as isize + ox_off) as usize;
                            for (d, v) in gin[start..start + (xhi - xlo)]
                                .iter_mut()
                                .zip(&src[xlo..xhi])
                            {
                                *d += v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                gin[row_in + ((ox * s) as isize + ox_off) as usize] += src[ox];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn forward(&self, x: &Map) -> Map {
        debug_assert_eq!(x.c, self.cin);
        let (oh, ow) = self.out_size(x.h, x.w);
        let n = oh * ow;
        let owned;
        let col: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        let taps = self.cin * self.kernel * self.kernel;
        let mut y = Map::zeros(self.cout, oh, ow);
        for co in 0..self.cout {
            y.channel_mut(co).fill(self.bias.data[co]);
        }
        // tap-major so each unfolded row is read once
        for j in 0..taps {
            let cj = &col[j * n..(j + 1) * n];
            for co in 0..self.cout {
                axpy(
                    &mut y.data[co * n..(co + 1) * n],
                    self.weight.data[co * taps + j],
                    cj,
                );
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grads`, returns the input gradient.
    pub fn backward(&self, x: &Map, gy: &Map, grads: &mut Conv2d) -> Map {
        let (oh, ow) = (gy.h, gy.w);
        let n = oh * ow;
        let owned;
        let col: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        let taps = self.cin * self.kernel * self.kernel;
        let mut gcol = vec![0.0; taps * n];
        for co in 0..self.cout {
            grads.bias.data[co] += sum(gy.channel(co));
        }
        for j in 0..taps {
            let cj = &col[j * n..(j + 1) * n];
            let gc = &mut gcol[j * n..(j + 1) * n];
            for co in 0..self.cout {
                let g = &gy.data[co * n..(co + 1) * n];
                grads.weight.data[co * taps + j] += dot4(g, cj);
                axpy(gc, self.weight.data[co * taps + j], g);
            }
        }
        if self.is_pointwise() {
            Map {
                c: x.c,
                h: x.h,
                w: x.w,
                data: gcol,
            }
        } else {
            self.col2im(&gcol, x.shape(), oh, ow)
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}/weight"), &self.weight));
        out.push((format!("{prefix}/bias"), &self.bias));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}/weight"), &mut self.weight));
        out.push((format!("{prefix}/bias"), &mut self.bias));
    }
}

/// Per-channel normalisation over spatial positions with a learned affine.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub const NORM_EPS: f64 = 1e-5;

pub struct NormCache {
    xhat: Map,
    inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        InstanceNorm {
            gamma: self.gamma.zeros_like(),
            beta: self.beta.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Map) -> (Map, NormCache) {
        let n = x.plane() as f64;
        let mut xhat = x.zeros_like();
        let mut y = x.zeros_like();
        let mut inv_std = Vec::with_capacity(x.c);
        for c in 0..x.c {
            let ch = x.channel(c);
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(inv);
            let (g, b) = (self.gamma.data[c], self.beta.data[c]);
            let xh = xhat.channel_mut(c);
            for (o, v) in xh.iter_mut().zip(ch) {
                *o = (v - mean) * inv;
            }
            for (o, v) in y.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
                *o = g * v + b;
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &NormCache, gy: &Map, grads: &mut InstanceNorm) -> Map {
        let n = gy.plane() as f64;
        let mut gx = gy.zeros_like();
        for c in 0..gy.c {
            let g = gy.channel(c);
            let xh = cache.xhat.channel(c);
            let gamma = self.gamma.data[c];
            let sum_g: f64 = g.iter().sum();
            let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            grads.gamma.data[c] += sum_gx;
            grads.beta.data[c] += sum_g;
            let k = gamma * cache.inv_std[c] / n;
            for ((o, gi), xi) in gx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *o = k * (n * gi - sum_g - xi * sum_gx);
            }
        }
        gx
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}/gamma"), &self.gamma));
        out.push((format!("{prefix}/beta"), &self.beta));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}/gamma"), &mut self.gamma));
        out.push((format!("{prefix}/beta"), &mut self.beta));
    }
}

pub fn silu(x: &Map) -> Map {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v *= sigmoid(*v));
    y
}

/// Gradient of SiLU at pre-activation `x`.
pub fn silu_backward(x: &Map, gy: &Map) -> Map {
    let mut gx = gy.clone();
    for (g, &v) in gx.data.iter_mut().zip(&x.data) {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    }
    gx
}

/// Stride-1 average pooling with window `size` (odd) and symmetric zero
/// padding of `(size - 1) / 2`, divisor `size * size` everywhere.
///
/// The operator is symmetric, so it is also its own adjoint: the backward
/// pass is `avg_pool_same(grad, size)`.
pub fn avg_pool_same(x: &Map, size: usize) -> Map {
    debug_assert!(size % 2 == 1);
    let r = (size / 2) as isize;
    let (h, w) = (x.h as isize, x.w as isize);
    let inv = 1.0 / (size * size) as f64;
    let mut horiz = vec![0.0; x.plane()];
    let mut y = x.zeros_like();
    for c in 0..x.c {
        let inp = x.channel(c);
        for yy in 0..h {
            let row = &inp[(yy * w) as usize..((yy + 1) * w) as usize];
            for xx in 0..w {
                let lo = (xx - r).max(0) as usize;
                let hi = (xx + r).min(w - 1) as usize;
                horiz[(yy * w + xx) as usize] = row[lo..=hi].iter().sum();
            }
        }
        let out = y.channel_mut(c);
        for yy in 0..h {
            let lo = (yy - r).max(0);
            let hi = (yy + r).min(h - 1);
            for xx in 0..w {
                let mut acc = 0.0;
                for k in lo..=hi {
                    acc += horiz[(k * w + xx) as usize];
                }
                out[(yy * w + xx) as usize] = acc * inv;
            }
        }
    }
    y
}

pub fn upsample2x(x: &Map) -> Map {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Map::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let inp = x.channel(c);
        let out = y.channel_mut(c);
        for yy in 0..h2 {
            for xx in 0..w2 {
                out[yy * w2 + xx] = inp[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward(gy: &Map) -> Map {
    let (h, w) = (gy.h / 2, gy.w / 2);
    let mut gx = Map::zeros(gy.c, h, w);
    for c in 0..gy.c {
        let g = gy.channel(c);
        let out = gx.channel_mut(c);
        for yy in 0..gy.h {
            for xx in 0..gy.w {
                out[(yy / 2) * w + xx / 2] += g[yy * gy.w + xx];
            }
        }
    }
    gx
}
