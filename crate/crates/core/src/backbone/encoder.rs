//! Pre-LN transformer encoder with hand-written backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward,
    LayerNormCache, Tensor, View,
};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_sequence_length: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: H=64, A=4, L=2, 256 positions.
    pub fn miniature(vocab_size: usize, seed: u64) -> Self {
        EncoderConfig {
            hidden_dim: 64,
            num_heads: 4,
            num_layers: 2,
            max_sequence_length: 256,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.num_heads == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_sequence_length < 16 {
            return Err(Error::Config(format!(
                "max_sequence_length {} is below the minimum of 16",
                self.max_sequence_length
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    /// Number of scalar parameters in the encoder, word embeddings and MLM head.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ff_dim();
        let v = self.vocab_size;
        let layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let encoder = self.max_sequence_length * d + self.num_layers * layer + 2 * d;
        let head = (d * d + d) + 2 * d + (d * v + v);
        v * d + encoder + head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

const LAYER_TENSOR_NAMES: [&str; 12] = [
    "ln1_gamma",
    "ln1_beta",
    "w_qkv",
    "b_qkv",
    "w_out",
    "b_out",
    "ln2_gamma",
    "ln2_beta",
    "w_ff1",
    "b_ff1",
    "w_ff2",
    "b_ff2",
];

impl LayerParams {
    fn init<R: Rng>(d: usize, f: usize, rng: &mut R) -> Self {
        LayerParams {
            ln1_gamma: Tensor::filled(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            w_qkv: Tensor::random_normal(&[d, 3 * d], INIT_STD, rng),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_out: Tensor::random_normal(&[d, d], INIT_STD, rng),
            b_out: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::filled(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            w_ff1: Tensor::random_normal(&[d, f], INIT_STD, rng),
            b_ff1: Tensor::zeros(&[f]),
            w_ff2: Tensor::random_normal(&[f, d], INIT_STD, rng),
            b_ff2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

/// Encoder parameters: position embeddings, the layer stack and the final
/// layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub positions: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl EncoderParams {
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Self {
        let d = config.hidden_dim;
        let positions = Tensor::random_normal(&[config.max_sequence_length, d], INIT_STD, rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::init(d, config.ff_dim(), rng))
            .collect();
        EncoderParams {
            positions,
            layers,
            final_gamma: Tensor::filled(&[d], 1.0),
            final_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        EncoderParams {
            positions: z(&self.positions),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: z(&l.ln1_gamma),
                    ln1_beta: z(&l.ln1_beta),
                    w_qkv: z(&l.w_qkv),
                    b_qkv: z(&l.b_qkv),
                    w_out: z(&l.w_out),
                    b_out: z(&l.b_out),
                    ln2_gamma: z(&l.ln2_gamma),
                    ln2_beta: z(&l.ln2_beta),
                    w_ff1: z(&l.w_ff1),
                    b_ff1: z(&l.b_ff1),
                    w_ff2: z(&l.w_ff2),
                    b_ff2: z(&l.b_ff2),
                })
                .collect(),
            final_gamma: z(&self.final_gamma),
            final_beta: z(&self.final_beta),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("encoder.positions".to_string(), &self.positions)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("encoder.layer{i}.{name}"), t));
            }
        }
        out.push(("encoder.final_gamma".into(), &self.final_gamma));
        out.push(("encoder.final_beta".into(), &self.final_beta));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.positions];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }
}

struct LayerCache {
    input: Vec<f64>,
    ln1: LayerNormCache,
    normed1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    context: Vec<f64>,
    ln2: LayerNormCache,
    normed2: Vec<f64>,
    pre_act: Vec<f64>,
    activated: Vec<f64>,
}

/// Activations retained by [`EncoderParams::forward`] for the backward pass.
pub struct EncoderCache {
    len: usize,
    attention_mask: Vec<bool>,
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
}

impl EncoderParams {
    /// Runs the encoder on `input` (`len x hidden_dim`, position embeddings
    /// are added here). Padded keys (`attention_mask[j] == false`) receive
    /// exactly zero attention weight.
    pub fn forward(
        &self,
        config: &EncoderConfig,
        input: &[f64],
        attention_mask: &[bool],
    ) -> Result<(Vec<f64>, EncoderCache)> {
        let d = config.hidden_dim;
        if !input.len().is_multiple_of(d) {
            return Err(Error::Dimension {
                expected: d,
                got: input.len() % d,
            });
        }
        let n = input.len() / d;
        if n > config.max_sequence_length {
            return Err(Error::Length {
                len: n,
                max: config.max_sequence_length,
            });
        }
        if attention_mask.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: attention_mask.len(),
            });
        }
        if n > 0 && !attention_mask.iter().any(|&m| m) {
            return Err(Error::Config("attention mask hides every position".into()));
        }

        let mut h: Vec<f64> = input
            .iter()
            .zip(&self.positions.data()[..n * d])
            .map(|(x, p)| x + p)
            .collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer_forward(layer, config, h, attention_mask);
            caches.push(cache);
            h = out;
        }
        let (out, final_ln) = layer_norm(&h, d, &self.final_gamma, &self.final_beta);
        Ok((
            out,
            EncoderCache {
                len: n,
                attention_mask: attention_mask.to_vec(),
                layers: caches,
                final_ln,
            },
        ))
    }

    /// Backpropagates `d_out` through the encoder. Returns the gradient with
    /// respect to the input embeddings. Parameter gradients are accumulated
    /// into `grads` when provided; when `None` the weight-gradient products
    /// are skipped entirely.
    pub fn backward(
        &self,
        config: &EncoderConfig,
        cache: &EncoderCache,
        d_out: &[f64],
        mut grads: Option<&mut EncoderParams>,
    ) -> Vec<f64> {
        let d = config.hidden_dim;
        let n = cache.len;
        let mut dh = layer_norm_backward(
            &cache.final_ln,
            d,
            &self.final_gamma,
            d_out,
            grads
                .as_deref_mut()
                .map(|g| (&mut g.final_gamma, &mut g.final_beta)),
        );
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let layer_grads = grads.as_deref_mut().map(|g| &mut g.layers[i]);
            dh = layer_backward(
                layer,
                config,
                &cache.layers[i],
                &cache.attention_mask,
                dh,
                layer_grads,
            );
        }
        if let Some(g) = grads {
            for (acc, v) in g.positions.data_mut()[..n * d].iter_mut().zip(&dh) {
                *acc += v;
            }
        }
        dh
    }
}

fn layer_forward(
    p: &LayerParams,
    config: &EncoderConfig,
    input: Vec<f64>,
    mask: &[bool],
) -> (Vec<f64>, LayerCache) {
    let d = config.hidden_dim;
    let n = input.len() / d;
    let (normed1, ln1) = layer_norm(&input, d, &p.ln1_gamma, &p.ln1_beta);
    let qkv = linear(&normed1, n, &p.w_qkv, &p.b_qkv);
    let (context, probs) = attention_forward(&qkv, n, config, mask);
    let attn_out = linear(&context, n, &p.w_out, &p.b_out);
    let residual1: Vec<f64> = input.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
    let (normed2, ln2) = layer_norm(&residual1, d, &p.ln2_gamma, &p.ln2_beta);
    let pre_act = linear(&normed2, n, &p.w_ff1, &p.b_ff1);
    let activated: Vec<f64> = pre_act.iter().map(|&v| gelu(v)).collect();
    let ff_out = linear(&activated, n, &p.w_ff2, &p.b_ff2);
    let out: Vec<f64> = residual1.iter().zip(&ff_out).map(|(a, b)| a + b).collect();
    (
        out,
        LayerCache {
            input,
            ln1,
            normed1,
            qkv,
            probs,
            context,
            ln2,
            normed2,
            pre_act,
            activated,
        },
    )
}

fn layer_backward(
    p: &LayerParams,
    config: &EncoderConfig,
    c: &LayerCache,
    mask: &[bool],
    d_out: Vec<f64>,
    mut grads: Option<&mut LayerParams>,
) -> Vec<f64> {
    let d = config.hidden_dim;
    let n = c.input.len() / d;

    // feed-forward branch
    let d_act = linear_backward(
        &c.activated,
        n,
        &p.w_ff2,
        &d_out,
        grads.as_deref_mut().map(|g| (&mut g.w_ff2, &mut g.b_ff2)),
    );
    let d_pre: Vec<f64> = d_act
        .iter()
        .zip(&c.pre_act)
        .map(|(g, &x)| g * gelu_grad(x))
        .collect();
    let d_normed2 = linear_backward(
        &c.normed2,
        n,
        &p.w_ff1,
        &d_pre,
        grads.as_deref_mut().map(|g| (&mut g.w_ff1, &mut g.b_ff1)),
    );
    let d_res1_ln = layer_norm_backward(
        &c.ln2,
        d,
        &p.ln2_gamma,
        &d_normed2,
        grads
            .as_deref_mut()
            .map(|g| (&mut g.ln2_gamma, &mut g.ln2_beta)),
    );
    let d_res1: Vec<f64> = d_out.iter().zip(&d_res1_ln).map(|(a, b)| a + b).collect();

    // attention branch
    let d_context = linear_backward(
        &c.context,
        n,
        &p.w_out,
        &d_res1,
        grads.as_deref_mut().map(|g| (&mut g.w_out, &mut g.b_out)),
    );
    let d_qkv = attention_backward(&c.qkv, &c.probs, &d_context, n, config, mask);
    let d_normed1 = linear_backward(
        &c.normed1,
        n,
        &p.w_qkv,
        &d_qkv,
        grads.as_deref_mut().map(|g| (&mut g.w_qkv, &mut g.b_qkv)),
    );
    let d_in_ln = layer_norm_backward(
        &c.ln1,
        d,
        &p.ln1_gamma,
        &d_normed1,
        grads.map(|g| (&mut g.ln1_gamma, &mut g.ln1_beta)),
    );
    d_res1.iter().zip(&d_in_ln).map(|(a, b)| a + b).collect()
}

/// Multi-head scaled dot-product attention over a fused `n x 3d` QKV block.
/// Returns the `n x d` context and the per-head `n x n` probabilities.
fn attention_forward(
    qkv: &[f64],
    n: usize,
    config: &EncoderConfig,
    mask: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let d = config.hidden_dim;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut context = vec![0.0; n * d];
    let mut probs = vec![0.0; config.num_heads * n * n];
    for head in 0..config.num_heads {
        let q = View::strided(&qkv[head * dh..], n, dh, stride, 1);
        let k = View::strided(&qkv[d + head * dh..], n, dh, stride, 1);
        let v = View::strided(&qkv[2 * d + head * dh..], n, dh, stride, 1);
        let p = &mut probs[head * n * n..(head + 1) * n * n];
        gemm(scale, q, k.t(), 0.0, p, n);
        for row in p.chunks_exact_mut(n) {
            let mut max = f64::NEG_INFINITY;
            for (s, &keep) in row.iter().zip(mask) {
                if keep {
                    max = max.max(*s);
                }
            }
            let mut total = 0.0;
            for (s, &keep) in row.iter_mut().zip(mask) {
                *s = if keep { (*s - max).exp() } else { 0.0 };
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        gemm(
            1.0,
            View::new(p, n, n),
            v,
            0.0,
            &mut context[head * dh..],
            d,
        );
    }
    (context, probs)
}

fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    d_context: &[f64],
    n: usize,
    config: &EncoderConfig,
    mask: &[bool],
) -> Vec<f64> {
    let d = config.hidden_dim;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut d_qkv = vec![0.0; n * stride];
    let mut d_probs = vec![0.0; n * n];
    for head in 0..config.num_heads {
        let q = View::strided(&qkv[head * dh..], n, dh, stride, 1);
        let k = View::strided(&qkv[d + head * dh..], n, dh, stride, 1);
        let v = View::strided(&qkv[2 * d + head * dh..], n, dh, stride, 1);
        let p = &probs[head * n * n..(head + 1) * n * n];
        let d_ctx = View::strided(&d_context[head * dh..], n, dh, d, 1);

        // dV = P^T dC
        gemm(
            1.0,
            View::new(p, n, n).t(),
            d_ctx,
            0.0,
            &mut d_qkv[2 * d + head * dh..],
            stride,
        );
        // dP = dC V^T
        gemm(1.0, d_ctx, v.t(), 0.0, &mut d_probs, n);
        // dS = P * (dP - rowsum(dP * P))
        for (p_row, dp_row) in p.chunks_exact(n).zip(d_probs.chunks_exact_mut(n)) {
            let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
            for ((ds, &pv), &keep) in dp_row.iter_mut().zip(p_row).zip(mask) {
                *ds = if keep { pv * (*ds - dot) } else { 0.0 };
            }
        }
        let ds = View::new(&d_probs, n, n);
        // dQ = dS K * scale, dK = dS^T Q * scale
        gemm(scale, ds, k, 0.0, &mut d_qkv[head * dh..], stride);
        gemm(scale, ds.t(), q, 0.0, &mut d_qkv[d + head * dh..], stride);
    }
    d_qkv
}
