//! Masked-language-model stack: tokenizer, encoder, MLM head and the word
//! embedding table that prompt vectors are spliced into.

pub mod checkpoint;
mod encoder;
mod head;
mod pretrain;
pub mod tensor;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{EncoderCache, EncoderConfig, EncoderParams, LayerParams, INIT_STD};
pub use head::{HeadCache, MlmHead};
pub use pretrain::{heldout_mlm_loss, pretrain_mlm, PretrainConfig, PretrainOutcome};
pub use tensor::{hash_tensors, Tensor};
pub use tokenizer::{TokenId, Tokenizer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    FrozenBackbone,
    FullFinetune,
}

/// Inference surface shared by the built-in backbone and any external
/// pretrained model plugged in through an adapter.
pub trait MaskedLanguageModel {
    fn tokenizer(&self) -> &Tokenizer;
    fn hidden_dim(&self) -> usize;
    fn max_sequence_length(&self) -> usize;
    /// Word-embedding rows for `ids`, shape `len x hidden_dim`.
    fn embed_ids(&self, ids: &[TokenId]) -> Result<Tensor>;
    /// Hidden states for an embedded sequence, shape `len x hidden_dim`.
    fn forward_hidden(&self, input: &Tensor, attention_mask: &[bool]) -> Result<Tensor>;
    /// Vocabulary logits for one hidden vector.
    fn mlm_logits(&self, hidden: &[f64]) -> Result<Vec<f64>>;
}

/// All trainable backbone arrays. Also used as the gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub word_embeddings: Tensor,
    pub encoder: EncoderParams,
    pub head: MlmHead,
}

impl BackboneParams {
    pub fn init(config: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let word_embeddings =
            Tensor::random_normal(&[config.vocab_size, config.hidden_dim], INIT_STD, &mut rng);
        let encoder = EncoderParams::init(config, &mut rng);
        let head = MlmHead::init(config.hidden_dim, config.vocab_size, &mut rng);
        BackboneParams {
            word_embeddings,
            encoder,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        BackboneParams {
            word_embeddings: Tensor::zeros(self.word_embeddings.shape()),
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("word_embeddings".to_string(), &self.word_embeddings)];
        out.extend(self.encoder.named_tensors());
        out.extend(self.head.named_tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.word_embeddings];
        out.extend(self.encoder.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }
}

/// Byte-level digests of each parameter group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterHashes {
    pub encoder: String,
    pub word_embeddings: String,
    pub mlm_head: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: EncoderConfig,
    tokenizer: Tokenizer,
    pub params: BackboneParams,
    pub freeze_policy: FreezePolicy,
}

impl Backbone {
    /// Fresh randomly initialised backbone; the config's vocabulary size is
    /// taken from the tokenizer.
    pub fn new(mut config: EncoderConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        config.validate()?;
        let params = BackboneParams::init(&config);
        Ok(Backbone {
            config,
            tokenizer,
            params,
            freeze_policy: FreezePolicy::default(),
        })
    }

    pub fn from_parts(
        config: EncoderConfig,
        tokenizer: Tokenizer,
        params: BackboneParams,
        freeze_policy: FreezePolicy,
    ) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "config vocab_size {} differs from tokenizer size {}",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let fresh = BackboneParams::init(&config);
        for ((name, a), b) in fresh.named_tensors().iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Backbone {
            config,
            tokenizer,
            params,
            freeze_policy,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn parameter_count(&self) -> usize {
        self.params.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn hashes(&self) -> ParameterHashes {
        ParameterHashes {
            encoder: hash_tensors(self.params.encoder.tensors()),
            word_embeddings: hash_tensors([&self.params.word_embeddings]),
            mlm_head: hash_tensors(self.params.head.tensors()),
        }
    }

    /// Digest over every backbone array.
    pub fn parameter_hash(&self) -> String {
        hash_tensors(self.params.tensors())
    }

    /// Forward pass that keeps the activations needed for backprop.
    pub fn forward_with_cache(
        &self,
        input: &[f64],
        attention_mask: &[bool],
    ) -> Result<(Vec<f64>, EncoderCache)> {
        self.params
            .encoder
            .forward(&self.config, input, attention_mask)
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.vocab_size() {
            Ok(())
        } else {
            Err(Error::TokenId {
                id,
                vocab_size: self.vocab_size(),
            })
        }
    }

    pub fn encode_tokens(&self, text: &str) -> Vec<TokenId> {
        self.tokenizer.encode(text)
    }
}

impl MaskedLanguageModel for Backbone {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn max_sequence_length(&self) -> usize {
        self.config.max_sequence_length
    }

    fn embed_ids(&self, ids: &[TokenId]) -> Result<Tensor> {
        let d = self.config.hidden_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            self.check_id(id)?;
            data.extend_from_slice(self.params.word_embeddings.row(id as usize));
        }
        Ok(Tensor::from_vec(&[ids.len(), d], data))
    }

    fn forward_hidden(&self, input: &Tensor, attention_mask: &[bool]) -> Result<Tensor> {
        let d = self.config.hidden_dim;
        if !input.is_empty() && input.cols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: input.cols(),
            });
        }
        let (out, _) = self.forward_with_cache(input.data(), attention_mask)?;
        Ok(Tensor::from_vec(&[out.len() / d, d], out))
    }

    fn mlm_logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.config.hidden_dim {
            return Err(Error::Dimension {
                expected: self.config.hidden_dim,
                got: hidden.len(),
            });
        }
        Ok(self.params.head.forward(hidden).0)
    }
}

#[cfg(test)]
mod tests {
    use super::tensor::softmax;
    use super::*;

    fn tiny() -> Backbone {
        let tok = Tokenizer::build(["a b c d e f g h"], &["yes", "no"]);
        let config = EncoderConfig {
            hidden_dim: 16,
            num_heads: 2,
            num_layers: 2,
            max_sequence_length: 32,
            vocab_size: 0,
            seed: 3,
        };
        Backbone::new(config, tok).unwrap()
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let b = tiny();
        assert_eq!(b.parameter_count(), b.config().parameter_count());
    }

    #[test]
    fn rejects_indivisible_heads_and_short_context() {
        let tok = Tokenizer::build(["a"], &[]);
        let mut c = EncoderConfig::miniature(0, 1);
        c.num_heads = 5;
        assert!(Backbone::new(c.clone(), tok.clone()).is_err());
        c.num_heads = 4;
        c.max_sequence_length = 8;
        assert!(Backbone::new(c, tok).is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let b = tiny();
        let ids: Vec<TokenId> = (0..10).map(|i| (i % 12) as TokenId).collect();
        let x = b.embed_ids(&ids).unwrap();
        let mask = vec![true; 10];
        let h1 = b.forward_hidden(&x, &mask).unwrap();
        let h2 = b.forward_hidden(&x, &mask).unwrap();
        assert_eq!(h1.shape(), &[10, 16]);
        assert_eq!(h1, h2);
    }

    #[test]
    fn overlong_input_is_rejected() {
        let b = tiny();
        let ids = vec![5; 33];
        let x = b.embed_ids(&ids).unwrap();
        assert!(matches!(
            b.forward_hidden(&x, &[true; 33]),
            Err(Error::Length { len: 33, max: 32 })
        ));
    }

    #[test]
    fn padded_positions_do_not_leak() {
        let b = tiny();
        let ids: Vec<TokenId> = vec![5, 6, 7, 8, 9, 10, 2, 2];
        let mask: Vec<bool> = ids.iter().map(|&i| i != 2).collect();
        let x = b.embed_ids(&ids).unwrap();
        let mut y = x.clone();
        // overwrite padded rows with arbitrary content
        for r in 6..8 {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = (r * 7 + j) as f64 * 0.3 - 1.0;
            }
        }
        let hx = b.forward_hidden(&x, &mask).unwrap();
        let hy = b.forward_hidden(&y, &mask).unwrap();
        for r in 0..6 {
            for (a, c) in hx.row(r).iter().zip(hy.row(r)) {
                assert!((a - c).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn embed_ids_matches_table_rows() {
        let b = tiny();
        let e = b.embed_ids(&[0, 0, 7]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(2), b.params.word_embeddings.row(7));
        assert!(b.embed_ids(&[]).unwrap().is_empty());
        assert!(matches!(
            b.embed_ids(&[999]),
            Err(Error::TokenId { id: 999, .. })
        ));
    }

    #[test]
    fn mlm_logits_shape_and_normalisation() {
        let b = tiny();
        let h = vec![0.1; 16];
        let logits = b.mlm_logits(&h).unwrap();
        assert_eq!(logits.len(), b.vocab_size());
        assert!((softmax(&logits).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(matches!(
            b.mlm_logits(&[0.0; 3]),
            Err(Error::Dimension {
                expected: 16,
                got: 3
            })
        ));
    }
}
