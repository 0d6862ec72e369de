//! Prompt tuning: casts a binary task to masked-token prediction and trains
//! the prompt table (plus optionally the MLM head and the backbone body).

mod schedule;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use schedule::LrSchedule;

use crate::backbone::checkpoint::{read_archive, restore_into, write_archive};
use crate::backbone::tensor::log_softmax;
use crate::backbone::tokenizer::{CLS_ID, MASK_ID};
use crate::backbone::{
    hash_tensors, Backbone, BackboneParams, EncoderParams, FreezePolicy, MaskedLanguageModel,
    MlmHead, Tensor, TokenId,
};
use crate::corpus::{DatasetSplit, Label, TaskExample};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::prompting::{
    assemble_embeddings, render, Item, MaskedSequence, PromptInit, PromptTable, PromptTemplate,
};
use crate::verbalizer::{Verbalizer, VerbalizerSpec};

/// Cross-entropy of `logits` against the one-hot target `gold` over the
/// full vocabulary.
pub fn mlm_loss(logits: &[f64], gold: TokenId) -> Result<f64> {
    if (gold as usize) >= logits.len() {
        return Err(Error::TokenId {
            id: gold,
            vocab_size: logits.len(),
        });
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {bad}")));
    }
    Ok(-log_softmax(logits)[gold as usize])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    PromptTable,
    MlmHead,
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub trainable_sets: BTreeSet<TrainableSet>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            epochs: 20,
            peak_lr: 3e-5,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            seed: 0,
            freeze_policy: FreezePolicy::FrozenBackbone,
            trainable_sets: [TrainableSet::PromptTable, TrainableSet::MlmHead]
                .into_iter()
                .collect(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("invalid peak_lr {}", self.peak_lr)));
        }
        if self.freeze_policy == FreezePolicy::FrozenBackbone
            && self.trainable_sets.contains(&TrainableSet::Backbone)
        {
            return Err(Error::Config(
                "frozen_backbone forbids training the backbone set".into(),
            ));
        }
        Ok(())
    }

    fn trains(&self, set: TrainableSet) -> bool {
        self.trainable_sets.contains(&set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    /// Probability of the predicted label among the candidates.
    pub score: f64,
    /// Positive-candidate probability, used for ranking.
    pub positive_score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHashes {
    pub encoder: String,
    pub word_embeddings: String,
    pub mlm_head: String,
    pub prompt_table: String,
}

/// Backbone plus everything prompt tuning adds on top of it.
#[derive(Clone, Debug)]
pub struct PromptModel {
    pub backbone: Backbone,
    pub prompts: PromptTable,
    pub template: PromptTemplate,
    pub verbalizer: Verbalizer,
}

impl PromptModel {
    pub fn new(
        backbone: Backbone,
        template: PromptTemplate,
        verbalizer: &VerbalizerSpec,
        init: &PromptInit,
        seed: u64,
    ) -> Result<Self> {
        template.validate()?;
        let verbalizer = verbalizer.resolve(backbone.tokenizer())?;
        let prompts = PromptTable::init(template.prompt_count, &backbone, init, seed)?;
        Ok(PromptModel {
            backbone,
            prompts,
            template,
            verbalizer,
        })
    }

    pub fn render(&self, example: &TaskExample) -> Result<MaskedSequence> {
        render(
            &self.template,
            example,
            self.backbone.tokenizer(),
            self.backbone.max_sequence_length(),
        )
    }

    pub fn logits(&self, seq: &MaskedSequence) -> Result<Vec<f64>> {
        let input = assemble_embeddings(seq, &self.backbone, &self.prompts)?;
        let mask = vec![true; seq.len()];
        let hidden = self.backbone.forward_hidden(&input, &mask)?;
        self.backbone.mlm_logits(hidden.row(seq.mask_index))
    }

    pub fn predict_sequence(&self, seq: &MaskedSequence) -> Result<Prediction> {
        let logits = self.logits(seq)?;
        let (label, score) = self.verbalizer.predict_label(&logits);
        Ok(Prediction {
            label,
            score,
            positive_score: self.verbalizer.ranking_score(&logits),
        })
    }

    pub fn predict(&self, example: &TaskExample) -> Result<Prediction> {
        self.predict_sequence(&self.render(example)?)
    }

    pub fn hashes(&self) -> ModelHashes {
        let b = self.backbone.hashes();
        ModelHashes {
            encoder: b.encoder,
            word_embeddings: b.word_embeddings,
            mlm_head: b.mlm_head,
            prompt_table: self.prompts.hash(),
        }
    }

    /// Digest over the backbone and the prompt table.
    pub fn parameter_hash(&self) -> String {
        let mut all = self.backbone.params.tensors();
        all.push(&self.prompts.vectors);
        hash_tensors(all)
    }

    /// Training loss of one example and its gradient with respect to the
    /// parameter groups in `sets`.
    pub fn gradients(
        &self,
        example: &TaskExample,
        sets: &BTreeSet<TrainableSet>,
    ) -> Result<(f64, Gradients)> {
        let seq = self.render(example)?;
        let mut grads = Gradients::zeros_for(self);
        let gold = self.verbalizer.gold_id(example.label);
        let (loss, _) = self.loss_and_grad(&seq, gold, sets, &mut grads, 1.0)?;
        Ok((loss, grads))
    }

    /// Loss of one rendered example; accumulates `scale`-weighted gradients
    /// for the trainable sets into `grads`.
    fn loss_and_grad(
        &self,
        seq: &MaskedSequence,
        gold: TokenId,
        sets: &BTreeSet<TrainableSet>,
        grads: &mut Gradients,
        scale: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let d = self.backbone.hidden_dim();
        let input = assemble_embeddings(seq, &self.backbone, &self.prompts)?;
        let mask = vec![true; seq.len()];
        let (hidden, cache) = self.backbone.forward_with_cache(input.data(), &mask)?;
        let row = &hidden[seq.mask_index * d..(seq.mask_index + 1) * d];
        let head = &self.backbone.params.head;
        let (logits, head_cache) = head.forward(row);
        let loss = mlm_loss(&logits, gold)?;

        let mut d_logits: Vec<f64> = log_softmax(&logits)
            .into_iter()
            .map(|l| l.exp() * scale)
            .collect();
        d_logits[gold as usize] -= scale;
        let trains = |set| sets.contains(&set);
        let g = &mut grads.backbone;
        let head_grads = trains(TrainableSet::MlmHead).then_some(&mut g.head);
        let d_row = head.backward(&head_cache, &d_logits, head_grads);

        let train_body = trains(TrainableSet::Backbone);
        if trains(TrainableSet::PromptTable) || train_body {
            let mut d_hidden = vec![0.0; hidden.len()];
            d_hidden[seq.mask_index * d..(seq.mask_index + 1) * d].copy_from_slice(&d_row);
            let d_input = self.backbone.params.encoder.backward(
                self.backbone.config(),
                &cache,
                &d_hidden,
                if train_body {
                    Some(&mut g.encoder)
                } else {
                    None
                },
            );
            for (pos, item) in seq.items.iter().enumerate() {
                let src = &d_input[pos * d..(pos + 1) * d];
                let target = match *item {
                    Item::Prompt(slot) if trains(TrainableSet::PromptTable) => {
                        grads.prompts.row_mut(slot - 1)
                    }
                    Item::Prompt(_) => continue,
                    _ if !train_body => continue,
                    Item::Token(t) => g.word_embeddings.row_mut(t as usize),
                    Item::Cls => g.word_embeddings.row_mut(CLS_ID as usize),
                    Item::Mask => g.word_embeddings.row_mut(MASK_ID as usize),
                };
                for (acc, v) in target.iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        Ok((loss, logits))
    }

    /// Parameters of the trainable sets, in a fixed order.
    fn trainable_params(&mut self, config: &TrainConfig) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if config.trains(TrainableSet::PromptTable) {
            out.push(&mut self.prompts.vectors);
        }
        let params = &mut self.backbone.params;
        if config.trains(TrainableSet::MlmHead) {
            out.extend(params.head.tensors_mut());
        }
        if config.trains(TrainableSet::Backbone) {
            out.push(&mut params.word_embeddings);
            out.extend(params.encoder.tensors_mut());
        }
        out
    }
}

/// Gradients for every parameter group; only the groups being trained are
/// ever written.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub prompts: Tensor,
    pub backbone: BackboneParams,
}

impl Gradients {
    pub fn zeros_for(model: &PromptModel) -> Self {
        Gradients {
            prompts: Tensor::zeros(model.prompts.vectors.shape()),
            backbone: model.backbone.params.zeros_like(),
        }
    }

    fn selected(&mut self, sets: &BTreeSet<TrainableSet>) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if sets.contains(&TrainableSet::PromptTable) {
            out.push(&mut self.prompts);
        }
        let b = &mut self.backbone;
        if sets.contains(&TrainableSet::MlmHead) {
            out.extend(b.head.tensors_mut());
        }
        if sets.contains(&TrainableSet::Backbone) {
            out.push(&mut b.word_embeddings);
            out.extend(b.encoder.tensors_mut());
        }
        out
    }
}

/// Snapshot of the trainable state at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub validation_accuracy: f64,
    pub prompts: Tensor,
    pub head: MlmHead,
    /// Word embeddings and encoder, present only when the backbone trained.
    pub body: Option<(Tensor, EncoderParams)>,
}

impl Checkpoint {
    /// Snapshot of `model`'s current prompt table and head (and body when
    /// `with_body`).
    pub fn capture(model: &PromptModel, epoch: usize, accuracy: f64, with_body: bool) -> Self {
        let p = &model.backbone.params;
        Checkpoint {
            epoch,
            validation_accuracy: accuracy,
            prompts: model.prompts.vectors.clone(),
            head: p.head.clone(),
            body: with_body.then(|| (p.word_embeddings.clone(), p.encoder.clone())),
        }
    }

    /// Writes the snapshot back into `model`.
    pub fn restore(&self, model: &mut PromptModel) -> Result<()> {
        if self.prompts.shape() != model.prompts.vectors.shape() {
            return Err(Error::Checkpoint("prompt table shape differs".into()));
        }
        model.prompts.vectors = self.prompts.clone();
        model.backbone.params.head = self.head.clone();
        if let Some((emb, enc)) = &self.body {
            model.backbone.params.word_embeddings = emb.clone();
            model.backbone.params.encoder = enc.clone();
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("prompt.table".to_string(), &self.prompts)];
        out.extend(self.head.named_tensors());
        if let Some((emb, enc)) = &self.body {
            out.push(("word_embeddings".into(), emb));
            out.extend(enc.named_tensors());
        }
        out
    }

    pub fn hash(&self) -> String {
        hash_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "prompt_checkpoint",
            "epoch": self.epoch,
            "validation_accuracy": self.validation_accuracy,
            "has_body": self.body.is_some(),
        });
        write_archive(path, meta, &self.named_tensors())
    }

    /// Loads a checkpoint whose shapes match `model`.
    pub fn load(path: &Path, model: &PromptModel) -> Result<Self> {
        let (meta, mut tensors) = read_archive(path)?;
        if meta["kind"] != "prompt_checkpoint" {
            return Err(Error::Checkpoint("not a prompt checkpoint".into()));
        }
        let mut ck = Checkpoint::capture(
            model,
            meta["epoch"].as_u64().unwrap_or(0) as usize,
            meta["validation_accuracy"].as_f64().unwrap_or(0.0),
            meta["has_body"].as_bool().unwrap_or(false),
        );
        restore_into(&mut tensors, "prompt.table", &mut ck.prompts)?;
        let head_names: Vec<String> = ck
            .head
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (name, t) in head_names.iter().zip(ck.head.tensors_mut()) {
            restore_into(&mut tensors, name, t)?;
        }
        if let Some((emb, enc)) = &mut ck.body {
            restore_into(&mut tensors, "word_embeddings", emb)?;
            let names: Vec<String> = enc.named_tensors().into_iter().map(|(n, _)| n).collect();
            for (name, t) in names.iter().zip(enc.tensors_mut()) {
                restore_into(&mut tensors, name, t)?;
            }
        }
        Ok(ck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub lr_last: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    /// Validation accuracy before any update.
    pub initial_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

fn accuracy_of(model: &PromptModel, seqs: &[(MaskedSequence, Label)]) -> Result<f64> {
    let mut correct = 0;
    for (seq, label) in seqs {
        if model.predict_sequence(seq)?.label == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / seqs.len() as f64)
}

fn render_all(
    model: &PromptModel,
    examples: &[TaskExample],
) -> Result<Vec<(MaskedSequence, Label)>> {
    examples
        .iter()
        .map(|e| Ok((model.render(e)?, e.label)))
        .collect()
}

/// Trains on `split.train`, selecting the epoch with the best accuracy on
/// `split.validation` (earliest epoch on ties). On return `model` holds the
/// selected checkpoint.
pub fn train(
    model: &mut PromptModel,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    fit(model, &split.train, &split.validation, config)
}

/// Continues training an already tuned model on a few target-language
/// examples; same contract as [`train`].
pub fn few_shot_continue(
    model: &mut PromptModel,
    few_target: &[TaskExample],
    validation: &[TaskExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if few_target.is_empty() {
        return Err(Error::Data(
            "few-shot continuation needs at least one example".into(),
        ));
    }
    fit(model, few_target, validation, config)
}

fn fit(
    model: &mut PromptModel,
    train_examples: &[TaskExample],
    validation: &[TaskExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_examples.is_empty() {
        return Err(Error::MissingSplit("train (empty)".into()));
    }
    if validation.is_empty() {
        return Err(Error::MissingSplit("validation (empty)".into()));
    }
    let train_seqs = render_all(model, train_examples)?;
    let val_seqs = render_all(model, validation)?;
    let golds: Vec<TokenId> = train_seqs
        .iter()
        .map(|(_, l)| model.verbalizer.gold_id(*l))
        .collect();

    let steps_per_epoch = train_seqs.len().div_ceil(config.batch_size);
    let schedule = LrSchedule::new(
        steps_per_epoch,
        steps_per_epoch * config.epochs,
        config.peak_lr,
    )?;
    let mut optimizer = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut grads = Gradients::zeros_for(model);
    let sets = &config.trainable_sets;
    let with_body = config.trains(TrainableSet::Backbone);

    let initial_val_accuracy = accuracy_of(model, &val_seqs)?;
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ epoch as u64));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            for g in grads.selected(sets) {
                g.fill_zero();
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (seq, label) = &train_seqs[i];
                let (loss, logits) = model.loss_and_grad(seq, golds[i], sets, &mut grads, scale)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, step {step}, example {}",
                        train_examples[i].id
                    )));
                }
                loss_sum += loss;
                if model.verbalizer.predict_label(&logits).0 == *label {
                    correct += 1;
                }
            }
            clip_grad_norm(grads.selected(sets), config.max_grad_norm);
            step += 1;
            lr = schedule.lr_at(step)?;
            let grad_refs: Vec<&Tensor> = grads.selected(sets).into_iter().map(|g| &*g).collect();
            optimizer.step(model.trainable_params(config), grad_refs, lr);
        }
        let val_accuracy = accuracy_of(model, &val_seqs)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_seqs.len() as f64,
            train_accuracy: correct as f64 / train_seqs.len() as f64,
            val_accuracy,
            lr_last: lr,
        });
        log::debug!(
            "epoch {epoch}: loss {:.4} train acc {:.3} val acc {val_accuracy:.3}",
            loss_sum / train_seqs.len() as f64,
            correct as f64 / train_seqs.len() as f64
        );
        if best
            .as_ref()
            .is_none_or(|b| val_accuracy > b.validation_accuracy)
        {
            best = Some(Checkpoint::capture(model, epoch, val_accuracy, with_body));
        }
    }
    let best = best.expect("at least one epoch ran");
    best.restore(model)?;
    Ok(TrainOutcome {
        best,
        initial_val_accuracy,
        history,
    })
}

/// Pure inference on target-language examples.
pub fn zero_shot_apply(model: &PromptModel, examples: &[TaskExample]) -> Result<Vec<Prediction>> {
    examples.iter().map(|e| model.predict(e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let l = mlm_loss(&[0.0; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits() {
        let l = mlm_loss(&[10.0, 0.0, 0.0, 0.0], 0).unwrap();
        let oracle = (1.0 + 3.0 * (-10f64).exp()).ln();
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 1.362e-4).abs() < 1e-7);
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(
            mlm_loss(&[0.0, f64::NAN], 0),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            mlm_loss(&[0.0, 1.0], 2),
            Err(Error::TokenId { .. })
        ));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.trainable_sets.insert(TrainableSet::Backbone);
        assert!(c.validate().is_err());
        c.freeze_policy = FreezePolicy::FullFinetune;
        assert!(c.validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn documented_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.peak_lr), (10, 20, 3e-5));
        assert_eq!(c.freeze_policy, FreezePolicy::FrozenBackbone);
    }
}
