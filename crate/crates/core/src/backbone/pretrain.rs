//! Masked-language-model pretraining for the built-in backbone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::log_softmax;
use super::tokenizer::{TokenId, CLS_ID, MASK_ID};
use super::{Backbone, BackboneParams, EncoderConfig, MaskedLanguageModel, Tokenizer};
use crate::corpus::CodeSnippet;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::tuning::LrSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Fraction of the corpus held out for loss measurement.
    pub heldout_fraction: f64,
    /// Programs concatenated into one training sequence (truncated to the
    /// backbone's maximum length).
    pub programs_per_sequence: usize,
    pub seed: u64,
    /// Words added to the vocabulary even if absent from the corpus
    /// (verbalizer candidates, for instance).
    pub extra_words: Vec<String>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_rate: 0.15,
            steps: 200,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            heldout_fraction: 0.1,
            programs_per_sequence: 1,
            seed: 0,
            extra_words: vec!["yes".into(), "no".into()],
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!(
                "mask_rate {} must lie strictly between 0 and 1",
                self.mask_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.programs_per_sequence == 0 {
            return Err(Error::Config(
                "programs_per_sequence must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// Mean masked-token loss of each optimizer step.
    pub step_losses: Vec<f64>,
}

/// One masked training sequence: corrupted input ids plus the positions
/// and original ids the loss is computed on.
#[derive(Clone, Debug)]
struct MaskedSample {
    input: Vec<TokenId>,
    positions: Vec<usize>,
    targets: Vec<TokenId>,
}

fn corrupt<R: Rng>(
    ids: &[TokenId],
    mask_rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedSample {
    let mut input = ids.to_vec();
    // Position 0 holds [CLS] and is never a target.
    let mut positions: Vec<usize> = (1..ids.len())
        .filter(|_| rng.gen::<f64>() < mask_rate)
        .collect();
    if positions.is_empty() && ids.len() > 1 {
        positions.push(rng.gen_range(1..ids.len()));
    }
    let first_regular = Tokenizer::special_count() as TokenId;
    for &p in &positions {
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            input[p] = MASK_ID;
        } else if roll < 0.9 {
            input[p] = rng.gen_range(first_regular..vocab_size as TokenId);
        }
    }
    let targets = positions.iter().map(|&p| ids[p]).collect();
    MaskedSample {
        input,
        positions,
        targets,
    }
}

fn to_sequence(tokenizer: &Tokenizer, text: &str, max_len: usize) -> Vec<TokenId> {
    let mut ids = vec![CLS_ID];
    ids.extend(tokenizer.encode(text).into_iter().take(max_len - 1));
    ids
}

/// Loss and (optionally) gradients for one masked sample. Returns the summed
/// cross-entropy over the sample's target positions; gradients are scaled by
/// `grad_scale`.
fn sample_loss(
    backbone: &Backbone,
    sample: &MaskedSample,
    grads: Option<&mut BackboneParams>,
    grad_scale: f64,
) -> Result<f64> {
    let d = backbone.hidden_dim();
    let embedded = backbone.embed_ids(&sample.input)?;
    let mask = vec![true; sample.input.len()];
    let (hidden, cache) = backbone.forward_with_cache(embedded.data(), &mask)?;
    let mut rows = Vec::with_capacity(sample.positions.len() * d);
    for &p in &sample.positions {
        rows.extend_from_slice(&hidden[p * d..(p + 1) * d]);
    }
    let head = &backbone.params.head;
    let (logits, head_cache) = head.forward(&rows);
    let v = backbone.vocab_size();
    let mut loss = 0.0;
    let mut d_logits = vec![0.0; logits.len()];
    for (i, &target) in sample.targets.iter().enumerate() {
        let lp = log_softmax(&logits[i * v..(i + 1) * v]);
        loss -= lp[target as usize];
        for (j, l) in lp.iter().enumerate() {
            d_logits[i * v + j] = l.exp() * grad_scale;
        }
        d_logits[i * v + target as usize] -= grad_scale;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("pretraining loss".into()));
    }
    if let Some(g) = grads {
        let d_rows = head.backward(&head_cache, &d_logits, Some(&mut g.head));
        let mut d_hidden = vec![0.0; hidden.len()];
        for (k, &p) in sample.positions.iter().enumerate() {
            for j in 0..d {
                d_hidden[p * d + j] += d_rows[k * d + j];
            }
        }
        let d_input = backbone.params.encoder.backward(
            backbone.config(),
            &cache,
            &d_hidden,
            Some(&mut g.encoder),
        );
        for (pos, &id) in sample.input.iter().enumerate() {
            let row = g.word_embeddings.row_mut(id as usize);
            for j in 0..d {
                row[j] += d_input[pos * d + j];
            }
        }
    }
    Ok(loss)
}

/// Mean masked-token cross-entropy over pre-masked samples.
fn mean_loss(backbone: &Backbone, samples: &[MaskedSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        total += sample_loss(backbone, s, None, 0.0)?;
        count += s.targets.len();
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Mean MLM loss on `texts` under a fixed, seed-determined masking.
pub fn heldout_mlm_loss(
    backbone: &Backbone,
    texts: &[&str],
    mask_rate: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = backbone.max_sequence_length();
    let samples: Vec<MaskedSample> = texts
        .iter()
        .map(|t| {
            let ids = to_sequence(backbone.tokenizer(), t, max_len);
            corrupt(&ids, mask_rate, backbone.vocab_size(), &mut rng)
        })
        .collect();
    mean_loss(backbone, &samples)
}

/// Builds a vocabulary from `corpus`, initialises a backbone from `encoder`
/// and trains it with the masked-token objective for `config.steps`
/// optimizer steps. The trailing `heldout_fraction` of the corpus is kept out
/// of training and used to report loss before and after.
pub fn pretrain_mlm(
    corpus: &[CodeSnippet],
    encoder: EncoderConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    config.validate()?;
    let extra: Vec<&str> = config.extra_words.iter().map(String::as_str).collect();
    let tokenizer = Tokenizer::build(corpus.iter().map(|s| s.text.as_str()), &extra);
    let mut backbone = Backbone::new(encoder, tokenizer)?;

    let heldout_count = if corpus.len() < 2 {
        0
    } else {
        ((corpus.len() as f64 * config.heldout_fraction).ceil() as usize).max(1)
    };
    let (train_part, heldout_part) = corpus.split_at(corpus.len() - heldout_count);
    let heldout_texts: Vec<&str> = if heldout_part.is_empty() {
        train_part.iter().map(|s| s.text.as_str()).collect()
    } else {
        heldout_part.iter().map(|s| s.text.as_str()).collect()
    };
    let heldout_seed = config.seed ^ 0x05ee_d0f4_e1d0_u64;
    let initial_heldout_loss =
        heldout_mlm_loss(&backbone, &heldout_texts, config.mask_rate, heldout_seed)?;

    let max_len = backbone.max_sequence_length();
    let programs: Vec<Vec<TokenId>> = train_part
        .iter()
        .map(|s| backbone.tokenizer().encode(&s.text))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..programs.len()).collect();
    let mut cursor = order.len();
    let warmup = ((config.steps as f64 * config.warmup_fraction).round() as usize)
        .clamp(1, config.steps.max(1));
    let schedule = LrSchedule::new(warmup, config.steps.max(1), config.peak_lr)?;
    let mut optimizer = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut grads = backbone.params.zeros_like();
    let mut step_losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let mut ids = vec![CLS_ID];
            for _ in 0..config.programs_per_sequence {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                ids.extend_from_slice(&programs[order[cursor]]);
                cursor += 1;
            }
            ids.truncate(max_len);
            batch.push(corrupt(
                &ids,
                config.mask_rate,
                backbone.vocab_size(),
                &mut rng,
            ));
        }
        let targets: usize = batch.iter().map(|s| s.targets.len()).sum();
        if targets == 0 {
            step_losses.push(0.0);
            continue;
        }
        let scale = 1.0 / targets as f64;
        for t in grads.tensors_mut() {
            t.fill_zero();
        }
        let mut loss = 0.0;
        for sample in &batch {
            loss += sample_loss(&backbone, sample, Some(&mut grads), scale)?;
        }
        step_losses.push(loss * scale);
        clip_grad_norm(grads.tensors_mut(), config.max_grad_norm);
        let lr = schedule.lr_at(step + 1)?;
        optimizer.step(backbone.params.tensors_mut(), grads.tensors(), lr);
    }

    let final_heldout_loss =
        heldout_mlm_loss(&backbone, &heldout_texts, config.mask_rate, heldout_seed)?;
    Ok(PretrainOutcome {
        backbone,
        initial_heldout_loss,
        final_heldout_loss,
        step_losses,
    })
}
