//! Experimental protocols (zero-shot, few-shot continuation, monolingual),
//! ablation sweeps and metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::corpus::{DatasetSplit, Label, Origin, Task, TaskExample};
use crate::error::{Error, Result};
use crate::prompting::{Placement, PromptInit, PromptTemplate};
use crate::tuning::{
    few_shot_continue, train, zero_shot_apply, EpochRecord, ModelHashes, PromptModel, TrainConfig,
};
use crate::verbalizer::VerbalizerSpec;

/// Fraction of exact label matches.
pub fn accuracy(predictions: &[Label], gold: &[Label]) -> Result<f64> {
    check_lengths(predictions, gold)?;
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

fn check_lengths(predictions: &[Label], gold: &[Label]) -> Result<()> {
    if predictions.len() != gold.len() {
        return Err(Error::Dimension {
            expected: gold.len(),
            got: predictions.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Auxiliary; NaN-free, 0 when nothing was predicted positive.
    pub precision: f64,
    pub recall: f64,
    pub test_size: usize,
}

impl Metrics {
    pub fn compute(predictions: &[Label], gold: &[Label]) -> Result<Self> {
        let accuracy = accuracy(predictions, gold)?;
        let count = |p: Label, g: Label| {
            predictions
                .iter()
                .zip(gold)
                .filter(|(a, b)| **a == p && **b == g)
                .count() as f64
        };
        let tp = count(Label::Positive, Label::Positive);
        let fp = count(Label::Positive, Label::Negative);
        let fneg = count(Label::Negative, Label::Positive);
        let ratio = |n: f64, d: f64| if d > 0.0 { n / d } else { 0.0 };
        Ok(Metrics {
            accuracy,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fneg),
            test_size: gold.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    ZeroShot,
    FewShotCross,
    Monolingual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub kind: ProtocolKind,
    pub source_language: String,
    pub target_language: String,
    pub source_train_size: usize,
    #[serde(default)]
    pub target_train_size: usize,
    pub task: Task,
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ProtocolKind::ZeroShot if self.target_train_size != 0 => Err(Error::Config(
                "zero_shot protocol requires target_train_size = 0".into(),
            )),
            ProtocolKind::FewShotCross if self.target_train_size == 0 => Err(Error::Config(
                "few_shot_cross needs target_train_size >= 1; use zero_shot instead".into(),
            )),
            ProtocolKind::Monolingual if self.source_language != self.target_language => {
                Err(Error::Config(
                    "monolingual protocol requires source_language = target_language".into(),
                ))
            }
            _ if self.source_train_size == 0 => {
                Err(Error::Config("source_train_size must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Data for one protocol run. `target` may be omitted for monolingual runs.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub source: DatasetSplit,
    pub target: Option<DatasetSplit>,
}

/// Everything except the data and the backbone that determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSetup {
    pub template: PromptTemplate,
    pub verbalizer: VerbalizerSpec,
    pub prompt_init: PromptInit,
    pub prompt_seed: u64,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub prompt: u64,
    pub train: u64,
    pub backbone: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub protocol: Protocol,
    pub setup: RunSetup,
    pub backbone_hash: String,
    pub source_history: Vec<EpochRecord>,
    pub source_best_epoch: usize,
    pub source_validation_accuracy: f64,
    #[serde(default)]
    pub target_history: Vec<EpochRecord>,
    pub target_best_epoch: Option<usize>,
    pub metrics: Metrics,
    pub seeds: Seeds,
    pub initial_hashes: ModelHashes,
    pub final_hashes: ModelHashes,
    pub checkpoint_hash: String,
    /// Filled in by whoever persists artifacts.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

fn take(split: &[TaskExample], n: usize, name: &str) -> Result<Vec<TaskExample>> {
    if split.is_empty() {
        return Err(Error::MissingSplit(name.to_string()));
    }
    if split.len() < n {
        return Err(Error::Data(format!(
            "{name} has {} examples, protocol asks for {n}",
            split.len()
        )));
    }
    Ok(split[..n].to_vec())
}

fn require<'a>(split: &'a [TaskExample], name: &str) -> Result<&'a [TaskExample]> {
    if split.is_empty() {
        Err(Error::MissingSplit(name.to_string()))
    } else {
        Ok(split)
    }
}

fn run_id(protocol: &Protocol, setup: &RunSetup, backbone_hash: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(protocol).expect("protocol serialises"));
    h.update(serde_json::to_vec(setup).expect("setup serialises"));
    h.update(backbone_hash.as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Train on the source language, optionally continue on target samples,
/// then evaluate on the target test set. Returns the record and the final
/// model.
pub fn run_protocol(
    protocol: &Protocol,
    datasets: &Datasets,
    backbone: &Backbone,
    setup: &RunSetup,
) -> Result<(RunRecord, PromptModel)> {
    protocol.validate()?;
    let target = match (protocol.kind, &datasets.target) {
        (ProtocolKind::Monolingual, None) => &datasets.source,
        (_, Some(t)) => t,
        (_, None) => return Err(Error::MissingSplit("target".into())),
    };
    let source = DatasetSplit {
        train: take(
            &datasets.source.train,
            protocol.source_train_size,
            "source train",
        )?,
        validation: require(&datasets.source.validation, "source validation")?.to_vec(),
        test: Vec::new(),
        source_language: protocol.source_language.clone(),
        target_language: protocol.target_language.clone(),
    };
    let test = require(&target.test, "target test")?;

    let backbone_hash = backbone.parameter_hash();
    let mut model = PromptModel::new(
        backbone.clone(),
        setup.template.clone(),
        &setup.verbalizer,
        &setup.prompt_init,
        setup.prompt_seed,
    )?;
    let initial_hashes = model.hashes();
    let outcome = train(&mut model, &source, &setup.train)?;

    // The selected checkpoint must reproduce its validation score.
    let replay = predictions_accuracy(&model, &source.validation)?;
    if replay != outcome.best.validation_accuracy {
        return Err(Error::Invariant(format!(
            "restored checkpoint scores {replay} on source validation, recorded {}",
            outcome.best.validation_accuracy
        )));
    }

    let mut checkpoint_hash = outcome.best.hash();
    let (target_history, target_best_epoch) = if protocol.kind == ProtocolKind::FewShotCross {
        let few = take(&target.train, protocol.target_train_size, "target train")?;
        let val = require(&target.validation, "target validation")?;
        let cont = few_shot_continue(&mut model, &few, val, &setup.train)?;
        checkpoint_hash = cont.best.hash();
        (cont.history, Some(cont.best.epoch))
    } else {
        (Vec::new(), None)
    };

    let before = model.parameter_hash();
    let predictions = zero_shot_apply(&model, test)?;
    if model.parameter_hash() != before {
        return Err(Error::Invariant(
            "parameters changed during target evaluation".into(),
        ));
    }
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let gold: Vec<Label> = test.iter().map(|e| e.label).collect();
    let metrics = Metrics::compute(&labels, &gold)?;
    if !(0.0..=1.0).contains(&metrics.accuracy) || metrics.test_size != test.len() {
        return Err(Error::Invariant("metrics out of range".into()));
    }

    let record = RunRecord {
        run_id: run_id(protocol, setup, &backbone_hash),
        protocol: protocol.clone(),
        setup: setup.clone(),
        backbone_hash,
        source_history: outcome.history,
        source_best_epoch: outcome.best.epoch,
        source_validation_accuracy: outcome.best.validation_accuracy,
        target_history,
        target_best_epoch,
        metrics,
        seeds: Seeds {
            prompt: setup.prompt_seed,
            train: setup.train.seed,
            backbone: backbone.config().seed,
        },
        initial_hashes,
        final_hashes: model.hashes(),
        checkpoint_hash,
        artifacts: BTreeMap::new(),
    };
    Ok((record, model))
}

fn predictions_accuracy(model: &PromptModel, examples: &[TaskExample]) -> Result<f64> {
    let preds: Vec<Label> = zero_shot_apply(model, examples)?
        .into_iter()
        .map(|p| p.label)
        .collect();
    let gold: Vec<Label> = examples.iter().map(|e| e.label).collect();
    accuracy(&preds, &gold)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub placements: Vec<Placement>,
    pub prompt_counts: Vec<usize>,
    pub source_languages: Vec<String>,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.placements.is_empty()
            || self.prompt_counts.is_empty()
            || self.source_languages.is_empty()
        {
            return Err(Error::Config("ablation grid has an empty axis".into()));
        }
        Ok(())
    }

    /// Grid points in language-major, then placement, then count order.
    pub fn points(&self) -> Vec<(String, Placement, usize)> {
        let mut out = Vec::new();
        for lang in &self.source_languages {
            for &p in &self.placements {
                for &k in &self.prompt_counts {
                    out.push((lang.clone(), p, k));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub records: Vec<RunRecord>,
    /// Tab-separated summary keyed by grid coordinates.
    pub summary: String,
}

/// One run per grid point, all sharing `setup`'s seeds. `datasets` is keyed
/// by source language.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &Protocol,
    datasets: &BTreeMap<String, Datasets>,
    backbone: &Backbone,
    setup: &RunSetup,
) -> Result<AblationOutcome> {
    grid.validate()?;
    let mut records = Vec::new();
    let mut summary =
        String::from("source_language\tplacement\tprompt_count\tval_accuracy\ttarget_accuracy\n");
    for (lang, placement, k) in grid.points() {
        let data = datasets
            .get(&lang)
            .ok_or_else(|| Error::MissingSplit(format!("datasets for {lang}")))?;
        let mut protocol = base.clone();
        protocol.source_language = lang.clone();
        if protocol.kind == ProtocolKind::Monolingual {
            protocol.target_language = lang.clone();
        }
        let mut point = setup.clone();
        point.template.placement = placement;
        point.template.prompt_count = k;
        let (record, _) = run_protocol(&protocol, data, backbone, &point)?;
        log::info!(
            "{lang} {} k={k}: target accuracy {:.4}",
            placement.name(),
            record.metrics.accuracy
        );
        let _ = writeln!(
            summary,
            "{lang}\t{}\t{k}\t{:.6}\t{:.6}",
            placement.name(),
            record.source_validation_accuracy,
            record.metrics.accuracy
        );
        records.push(record);
    }
    Ok(AblationOutcome { records, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranked {
    /// Position in the input list.
    pub index: usize,
    pub score: f64,
}

/// Scores each code candidate against a natural-language `query` and sorts
/// descending; equal scores keep input order.
pub fn rank_candidates(
    model: &PromptModel,
    query: &str,
    candidates: &[String],
) -> Result<Vec<Ranked>> {
    let mut ranked = Vec::with_capacity(candidates.len());
    for (index, code) in candidates.iter().enumerate() {
        let example = TaskExample {
            id: format!("candidate{index}"),
            task: Task::CodeSearch,
            language: String::new(),
            text_a: code.clone(),
            text_b: query.to_string(),
            label: Label::Negative,
            origin: Origin::Synthetic,
        };
        ranked.push(Ranked {
            index,
            score: model.predict(&example)?.positive_score,
        });
    }
    sort_ranked(&mut ranked);
    Ok(ranked)
}

fn sort_ranked(ranked: &mut [Ranked]) {
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Method-name prediction by full enumeration: for every positive example,
/// scores the body against each name in `names`; an example counts when its
/// true name ranks first. Returns rank-1 accuracy.
pub fn method_name_rank1(
    model: &PromptModel,
    examples: &[TaskExample],
    names: &[String],
) -> Result<f64> {
    if names.is_empty() {
        return Err(Error::Data("empty name vocabulary".into()));
    }
    let positives: Vec<&TaskExample> = examples
        .iter()
        .filter(|e| e.label == Label::Positive)
        .collect();
    if positives.is_empty() {
        return Err(Error::Data("no positive method-name examples".into()));
    }
    let mut hits = 0;
    for ex in &positives {
        let mut ranked = Vec::with_capacity(names.len());
        for (index, name) in names.iter().enumerate() {
            let probe = TaskExample {
                text_b: name.clone(),
                ..(*ex).clone()
            };
            ranked.push(Ranked {
                index,
                score: model.predict(&probe)?.positive_score,
            });
        }
        sort_ranked(&mut ranked);
        if names[ranked[0].index] == ex.text_b {
            hits += 1;
        }
    }
    Ok(hits as f64 / positives.len() as f64)
}
