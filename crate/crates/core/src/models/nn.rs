//! Dense, convolution, batch-norm and pooling layers in f64 with explicit
//! backward passes. Activations are batch-major, `[batch, channels, h, w]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    /// Buffers such as batch-norm running statistics are not trained.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>, trainable: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), value, trainable });
        self.params.len() - 1
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.params[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.params[i].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradients laid out like the [`ParamStore`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn clear(&mut self) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Mutable views of gradient slots `i < j`.
pub fn pair_mut(g: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert!(i < j);
    let (lo, hi) = g.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

/// He-normal weights for a layer with `fan_in` inputs.
pub fn he_normal(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`, with `a`
/// (`m x k`) and `b` (`k x n`) given by row and column strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y[b, o] = sum_i x[b, i] * w[o, i] + bias[o]`.
pub fn dense_forward(x: &[f64], batch: usize, w: &[f64], bias: &[f64], out: usize) -> Vec<f64> {
    let inp = w.len() / out;
    let mut y: Vec<f64> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
    gemm(batch, inp, out, x, (inp, 1), w, (1, inp), 1.0, &mut y);
    y
}

/// Accumulates weight and bias gradients, returns the input gradient.
pub fn dense_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    w: &[f64],
    out: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let inp = w.len() / out;
    gemm(out, batch, inp, dy, (1, out), x, (inp, 1), 1.0, dw);
    for row in dy.chunks_exact(out) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dx = vec![0.0; batch * inp];
    gemm(batch, out, inp, dy, (out, 1), w, (inp, 1), 0.0, &mut dx);
    dx
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through a rectifier given its output.
pub fn relu_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect()
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Shape of one sample's activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn im2col(x: &[f64], d: Dims) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut col = vec![0.0; d.c * 9 * hw];
    for c in 0..d.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..d.h {
                    let sy = y + ky;
                    if sy < 1 || sy > d.h {
                        continue;
                    }
                    let src = &x[c * hw + (sy - 1) * d.w..][..d.w];
                    let dst = &mut row[y * d.w..][..d.w];
                    for xx in 0..d.w {
                        let sx = xx + kx;
                        if sx >= 1 && sx <= d.w {
                            dst[xx] = src[sx - 1];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], d: Dims) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut x = vec![0.0; d.len()];
    for c in 0..d.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..d.h {
                    let sy = y + ky;
                    if sy < 1 || sy > d.h {
                        continue;
                    }
                    let dst = &mut x[c * hw + (sy - 1) * d.w..][..d.w];
                    for xx in 0..d.w {
                        let sx = xx + kx;
                        if sx >= 1 && sx <= d.w {
                            dst[sx - 1] += row[y * d.w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3x3 convolution with zero padding 1 and no bias; `w` is `[out, in, 3, 3]`.
pub fn conv3x3_forward(x: &[f64], batch: usize, d: Dims, w: &[f64], out_c: usize) -> Vec<f64> {
    let hw = d.h * d.w;
    let k = d.c * 9;
    let per: Vec<Vec<f64>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let col = im2col(&x[b * d.len()..][..d.len()], d);
            let mut y = vec![0.0; out_c * hw];
            gemm(out_c, k, hw, w, (k, 1), &col, (hw, 1), 0.0, &mut y);
            y
        })
        .collect();
    per.concat()
}

/// Accumulates the weight gradient in sample order and returns the input gradient.
pub fn conv3x3_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    d: Dims,
    w: &[f64],
    out_c: usize,
    dw: &mut [f64],
) -> Vec<f64> {
    let hw = d.h * d.w;
    let k = d.c * 9;
    let per: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let col = im2col(&x[b * d.len()..][..d.len()], d);
            let g = &dy[b * out_c * hw..][..out_c * hw];
            let mut dwb = vec![0.0; out_c * k];
            gemm(out_c, hw, k, g, (hw, 1), &col, (1, hw), 0.0, &mut dwb);
            let mut dcol = vec![0.0; k * hw];
            gemm(k, out_c, hw, w, (1, k), g, (hw, 1), 0.0, &mut dcol);
            (dwb, col2im(&dcol, d))
        })
        .collect();
    let mut dx = Vec::with_capacity(batch * d.len());
    for (dwb, dxb) in per {
        for (a, v) in dw.iter_mut().zip(&dwb) {
            *a += v;
        }
        dx.extend(dxb);
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics gathered in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn channel_slices(batch: usize, d: Dims) -> impl Iterator<Item = (usize, usize)> {
    let hw = d.h * d.w;
    (0..batch).flat_map(move |b| (0..d.c).map(move |c| (c, (b * d.c + c) * hw)))
}

/// Normalizes with batch statistics.
pub fn batchnorm_train(
    x: &[f64],
    batch: usize,
    d: Dims,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, BnCache, BatchStats) {
    let hw = d.h * d.w;
    let n = (batch * hw) as f64;
    let mut mean = vec![0.0; d.c];
    for (c, off) in channel_slices(batch, d) {
        mean[c] += x[off..off + hw].iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d.c];
    for (c, off) in channel_slices(batch, d) {
        var[c] += x[off..off + hw].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (c, off) in channel_slices(batch, d) {
        for i in off..off + hw {
            xhat[i] = (x[i] - mean[c]) * inv_std[c];
            y[i] = gamma[c] * xhat[i] + beta[c];
        }
    }
    let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let stats = BatchStats { mean, var: var.iter().map(|v| v * unbiased).collect() };
    (y, BnCache { xhat, inv_std }, stats)
}

pub fn batchnorm_eval(
    x: &[f64],
    batch: usize,
    d: Dims,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut y = vec![0.0; x.len()];
    for (c, off) in channel_slices(batch, d) {
        let s = gamma[c] / (var[c] + BN_EPS).sqrt();
        for i in off..off + hw {
            y[i] = (x[i] - mean[c]) * s + beta[c];
        }
    }
    y
}

pub fn batchnorm_backward(
    dy: &[f64],
    cache: &BnCache,
    batch: usize,
    d: Dims,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let hw = d.h * d.w;
    let n = (batch * hw) as f64;
    let mut sum_dy = vec![0.0; d.c];
    let mut sum_dy_xhat = vec![0.0; d.c];
    for (c, off) in channel_slices(batch, d) {
        for i in off..off + hw {
            sum_dy[c] += dy[i];
            sum_dy_xhat[c] += dy[i] * cache.xhat[i];
        }
    }
    for c in 0..d.c {
        dgamma[c] += sum_dy_xhat[c];
        dbeta[c] += sum_dy[c];
    }
    let mut dx = vec![0.0; dy.len()];
    for (c, off) in channel_slices(batch, d) {
        let k = gamma[c] * cache.inv_std[c] / n;
        for i in off..off + hw {
            dx[i] = k * (n * dy[i] - sum_dy[c] - cache.xhat[i] * sum_dy_xhat[c]);
        }
    }
    dx
}

/// Blends batch statistics into running statistics.
pub fn update_running(running_mean: &mut [f64], running_var: &mut [f64], stats: &BatchStats) {
    for c in 0..running_mean.len() {
        running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * stats.mean[c];
        running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * stats.var[c];
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
/// Returns the output and the flat input index of each maximum.
pub fn maxpool2_forward(x: &[f64], batch: usize, d: Dims) -> (Vec<f64>, Vec<usize>, Dims) {
    let od = Dims { c: d.c, h: d.h / 2, w: d.w / 2 };
    let mut y = Vec::with_capacity(batch * od.len());
    let mut arg = Vec::with_capacity(batch * od.len());
    for plane in 0..batch * d.c {
        let base = plane * d.h * d.w;
        for oy in 0..od.h {
            for ox in 0..od.w {
                let mut best = base + 2 * oy * d.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * d.w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg, od)
}

pub fn maxpool2_backward(dy: &[f64], arg: &[usize], in_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

fn adaptive_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out).map(|i| (i * len / out, ((i + 1) * len).div_ceil(out))).collect()
}

/// Average pooling to a fixed `out x out` grid per channel.
pub fn adaptive_avg_forward(x: &[f64], batch: usize, d: Dims, out: usize) -> Vec<f64> {
    let (rows, cols) = (adaptive_bins(d.h, out), adaptive_bins(d.w, out));
    let mut y = Vec::with_capacity(batch * d.c * out * out);
    for plane in 0..batch * d.c {
        let base = plane * d.h * d.w;
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut s = 0.0;
                for r in r0..r1 {
                    s += x[base + r * d.w + c0..base + r * d.w + c1].iter().sum::<f64>();
                }
                y.push(s / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    y
}

pub fn adaptive_avg_backward(dy: &[f64], batch: usize, d: Dims, out: usize) -> Vec<f64> {
    let (rows, cols) = (adaptive_bins(d.h, out), adaptive_bins(d.w, out));
    let mut dx = vec![0.0; batch * d.len()];
    let mut k = 0;
    for plane in 0..batch * d.c {
        let base = plane * d.h * d.w;
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let g = dy[k] / ((r1 - r0) * (c1 - c0)) as f64;
                k += 1;
                for r in r0..r1 {
                    for v in &mut dx[base + r * d.w + c0..base + r * d.w + c1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}
