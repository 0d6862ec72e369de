//! Dense row-major `f64` tensors and the handful of kernels the encoder needs.
//!
//! Everything here operates on plain slices. Matrix products go through
//! `matrixmultiply`, which accepts arbitrary strides, so transposed operands
//! never need to be materialised.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn random_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let len = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0.0);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn update_hash(&self, hasher: &mut Sha256) {
        for dim in &self.shape {
            hasher.update((*dim as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "view out of bounds");
        }
        View {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c`, where `c` is `a.rows x b.cols` with
/// row stride `c_rs` and unit column stride.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64], c_rs: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * c_rs + n <= c.len(), "output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * c_rs..i * c_rs + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked against their slices above
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

/// `out = x * w + bias` for `x: n x d_in`, `w: d_in x d_out`.
pub fn linear(x: &[f64], n: usize, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (d_in, d_out) = (w.rows(), w.cols());
    let mut out = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(
        1.0,
        View::new(x, n, d_in),
        View::new(w.data(), d_in, d_out),
        1.0,
        &mut out,
        d_out,
    );
    out
}

/// Backward pass of [`linear`]. Returns `dx`; parameter gradients are
/// accumulated only when `grads` is given.
pub fn linear_backward(
    x: &[f64],
    n: usize,
    w: &Tensor,
    dy: &[f64],
    grads: Option<(&mut Tensor, &mut Tensor)>,
) -> Vec<f64> {
    let (d_in, d_out) = (w.rows(), w.cols());
    if let Some((dw, db)) = grads {
        gemm(
            1.0,
            View::new(x, n, d_in).t(),
            View::new(dy, n, d_out),
            1.0,
            dw.data_mut(),
            d_out,
        );
        let db = db.data_mut();
        for row in dy.chunks_exact(d_out) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let mut dx = vec![0.0; n * d_in];
    gemm(
        1.0,
        View::new(dy, n, d_out),
        View::new(w.data(), d_in, d_out).t(),
        0.0,
        &mut dx,
        d_in,
    );
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved normalised activations for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub fn layer_norm(
    x: &[f64],
    d: usize,
    gamma: &Tensor,
    beta: &Tensor,
) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    d: usize,
    gamma: &Tensor,
    dy: &[f64],
    grads: Option<(&mut Tensor, &mut Tensor)>,
) -> Vec<f64> {
    let n = dy.len() / d;
    if let Some((dg, db)) = grads {
        let (dg, db) = (dg.data_mut(), db.data_mut());
        for i in 0..n {
            for j in 0..d {
                dg[j] += dy[i * d + j] * cache.xhat[i * d + j];
                db[j] += dy[i * d + j];
            }
        }
    }
    let g = gamma.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..d {
            dxhat[j] = dy[i * d + j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// SHA-256 over the shapes and little-endian bytes of a group of tensors.
pub fn hash_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        t.update_hash(&mut hasher);
    }
    hex::encode(hasher.finalize())
}
