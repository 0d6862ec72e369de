use rand::Rng;

use super::encoder::INIT_STD;
use super::tensor::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LayerNormCache,
    Tensor,
};

/// MLM head: dense -> GELU -> layer norm -> vocabulary projection.
/// The projection is untied from the word embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead {
    pub w_dense: Tensor,
    pub b_dense: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub w_decoder: Tensor,
    pub b_decoder: Tensor,
}

pub struct HeadCache {
    input: Vec<f64>,
    pre_act: Vec<f64>,
    ln: LayerNormCache,
    normed: Vec<f64>,
}

impl MlmHead {
    pub fn init<R: Rng>(hidden_dim: usize, vocab_size: usize, rng: &mut R) -> Self {
        MlmHead {
            w_dense: Tensor::random_normal(&[hidden_dim, hidden_dim], INIT_STD, rng),
            b_dense: Tensor::zeros(&[hidden_dim]),
            ln_gamma: Tensor::filled(&[hidden_dim], 1.0),
            ln_beta: Tensor::zeros(&[hidden_dim]),
            w_decoder: Tensor::random_normal(&[hidden_dim, vocab_size], INIT_STD, rng),
            b_decoder: Tensor::zeros(&[vocab_size]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_dense.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.w_decoder.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        MlmHead {
            w_dense: z(&self.w_dense),
            b_dense: z(&self.b_dense),
            ln_gamma: z(&self.ln_gamma),
            ln_beta: z(&self.ln_beta),
            w_decoder: z(&self.w_decoder),
            b_decoder: z(&self.b_decoder),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.w_dense".into(), &self.w_dense),
            ("head.b_dense".into(), &self.b_dense),
            ("head.ln_gamma".into(), &self.ln_gamma),
            ("head.ln_beta".into(), &self.ln_beta),
            ("head.w_decoder".into(), &self.w_decoder),
            ("head.b_decoder".into(), &self.b_decoder),
        ]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_dense,
            &mut self.b_dense,
            &mut self.ln_gamma,
            &mut self.ln_beta,
            &mut self.w_decoder,
            &mut self.b_decoder,
        ]
    }

    /// Logits for each of the `n` hidden rows in `hidden` (`n x d`).
    pub fn forward(&self, hidden: &[f64]) -> (Vec<f64>, HeadCache) {
        let d = self.hidden_dim();
        let n = hidden.len() / d;
        let pre_act = linear(hidden, n, &self.w_dense, &self.b_dense);
        let activated: Vec<f64> = pre_act.iter().map(|&v| gelu(v)).collect();
        let (normed, ln) = layer_norm(&activated, d, &self.ln_gamma, &self.ln_beta);
        let logits = linear(&normed, n, &self.w_decoder, &self.b_decoder);
        (
            logits,
            HeadCache {
                input: hidden.to_vec(),
                pre_act,
                ln,
                normed,
            },
        )
    }

    /// Returns the gradient with respect to the hidden rows.
    pub fn backward(
        &self,
        cache: &HeadCache,
        d_logits: &[f64],
        mut grads: Option<&mut MlmHead>,
    ) -> Vec<f64> {
        let d = self.hidden_dim();
        let n = cache.input.len() / d;
        let d_normed = linear_backward(
            &cache.normed,
            n,
            &self.w_decoder,
            d_logits,
            grads
                .as_deref_mut()
                .map(|g| (&mut g.w_decoder, &mut g.b_decoder)),
        );
        let d_act = layer_norm_backward(
            &cache.ln,
            d,
            &self.ln_gamma,
            &d_normed,
            grads
                .as_deref_mut()
                .map(|g| (&mut g.ln_gamma, &mut g.ln_beta)),
        );
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(&cache.pre_act)
            .map(|(g, &x)| g * gelu_grad(x))
            .collect();
        linear_backward(
            &cache.input,
            n,
            &self.w_dense,
            &d_pre,
            grads.map(|g| (&mut g.w_dense, &mut g.b_dense)),
        )
    }
}
