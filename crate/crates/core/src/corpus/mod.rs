//! Dataset ingestion and construction for the three binary code tasks.
//!
//! Every builder is a pure function of its input and seed.

mod builders;
mod dialect;
mod io;

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

pub use builders::{
    build_clone_pairs, build_method_name_pairs, build_nlpl_pairs, extract_method_name, strip_name,
    MethodNameDataset,
};
pub use dialect::{
    build_dialect_datasets, default_keyword_map, dialect_clone_examples, generate_dialect_corpus,
    DialectCorpus, DialectDatasets, DialectLayout, DialectSpec, FAMILY_COUNT,
};
pub use io::{load_examples, save_examples};

use crate::backbone::Tokenizer;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    pub id: String,
    pub language: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
}

impl CodeSnippet {
    pub fn new(
        id: impl Into<String>,
        language: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        CodeSnippet {
            id: id.into(),
            language: language.into(),
            text: text.into(),
            token_count: None,
        }
    }

    pub fn with_token_count(mut self, tokenizer: &Tokenizer) -> Self {
        self.token_count = Some(tokenizer.token_count(&self.text));
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CloneDetection,
    CodeSearch,
    MethodNamePrediction,
}

impl Task {
    /// Whether `text_b` holds source code (and so falls under length limits).
    pub fn text_b_is_code(self) -> bool {
        matches!(self, Task::CloneDetection)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl Label {
    pub fn flipped(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Natural,
    RecombinedNegative,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: String,
    pub task: Task,
    pub language: String,
    pub text_a: String,
    pub text_b: String,
    pub label: Label,
    #[serde(default)]
    pub origin: Origin,
}

impl TaskExample {
    pub fn validate(&self) -> Result<()> {
        if self.text_a.is_empty() || self.text_b.is_empty() {
            return Err(Error::Data(format!(
                "example {} has an empty segment",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TaskExample>,
    pub validation: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    pub source_language: String,
    pub target_language: String,
}

impl DatasetSplit {
    /// Checks partition disjointness by id and 1:1 balance per partition.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, part) in self.partitions() {
            for ex in part {
                if !seen.insert(ex.id.as_str()) {
                    return Err(Error::Invariant(format!(
                        "example id {} appears in more than one partition ({name})",
                        ex.id
                    )));
                }
            }
            let (pos, neg) = label_counts(part);
            if pos != neg {
                return Err(Error::Invariant(format!(
                    "{name} partition is unbalanced: {pos} positive vs {neg} negative"
                )));
            }
        }
        Ok(())
    }

    pub fn partitions(&self) -> [(&'static str, &[TaskExample]); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }
}

/// `(positive, negative)` counts.
pub fn label_counts(examples: &[TaskExample]) -> (usize, usize) {
    let pos = examples
        .iter()
        .filter(|e| e.label == Label::Positive)
        .count();
    (pos, examples.len() - pos)
}

fn comment_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)/\*.*?\*/|//[^\n]*|#[^\n]*").expect("valid comment regex"))
}

/// Removes `//`, `/* */` and `#` comments with a single regex pass. String
/// literals are not tracked.
pub fn strip_comments(text: &str) -> String {
    comment_pattern().replace_all(text, "").into_owned()
}

/// Keeps the examples whose code segments have between `min_tokens` and
/// `max_tokens` tokens inclusive. `text_a` is always code; `text_b` only
/// for clone detection.
pub fn filter_by_length(
    examples: &[TaskExample],
    tokenizer: &Tokenizer,
    min_tokens: usize,
    max_tokens: usize,
) -> Result<Vec<TaskExample>> {
    if min_tokens > max_tokens {
        return Err(Error::Config(format!(
            "min_tokens {min_tokens} exceeds max_tokens {max_tokens}"
        )));
    }
    let fits = |text: &str| {
        let n = tokenizer.token_count(text);
        (min_tokens..=max_tokens).contains(&n)
    };
    Ok(examples
        .iter()
        .filter(|e| fits(&e.text_a) && (!e.task.text_b_is_code() || fits(&e.text_b)))
        .cloned()
        .collect())
}

pub const DEFAULT_MIN_TOKENS: usize = 125;
pub const DEFAULT_MAX_TOKENS: usize = 250;
const RECOMBINE_ATTEMPTS: usize = 100;

/// Equalises positive and negative counts.
///
/// Surplus negatives are dropped at random. Missing negatives are made by
/// pairing `text_a` of one positive with `text_b` of a different positive;
/// a candidate that matches an existing positive pair is redrawn, up to
/// 100 times per negative.
pub fn balance_binary(examples: &[TaskExample], seed: u64) -> Result<Vec<TaskExample>> {
    let positives: Vec<&TaskExample> = examples
        .iter()
        .filter(|e| e.label == Label::Positive)
        .collect();
    if positives.is_empty() {
        return Err(Error::Data(
            "cannot balance a dataset with no positives".into(),
        ));
    }
    let negatives = examples.len() - positives.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if negatives >= positives.len() {
        let neg_idx: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == Label::Negative)
            .map(|(i, _)| i)
            .collect();
        let keep: HashSet<usize> = neg_idx
            .choose_multiple(&mut rng, positives.len())
            .copied()
            .collect();
        return Ok(examples
            .iter()
            .enumerate()
            .filter(|(i, e)| e.label == Label::Positive || keep.contains(i))
            .map(|(_, e)| e.clone())
            .collect());
    }

    if positives.len() < 2 {
        return Err(Error::Data(
            "recombining negatives needs at least two positives".into(),
        ));
    }
    let mut positive_pairs: HashSet<(&str, &str)> = HashSet::new();
    for p in &positives {
        positive_pairs.insert((p.text_a.as_str(), p.text_b.as_str()));
        if p.task.text_b_is_code() {
            positive_pairs.insert((p.text_b.as_str(), p.text_a.as_str()));
        }
    }
    let mut out = examples.to_vec();
    let needed = positives.len() - negatives;
    for k in 0..needed {
        let mut made = None;
        for _ in 0..RECOMBINE_ATTEMPTS {
            let i = rng.gen_range(0..positives.len());
            let mut j = rng.gen_range(0..positives.len() - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (positives[i], positives[j]);
            if !positive_pairs.contains(&(a.text_a.as_str(), b.text_b.as_str())) {
                made = Some(TaskExample {
                    id: format!("neg{k}:{}:{}", a.id, b.id),
                    task: a.task,
                    language: a.language.clone(),
                    text_a: a.text_a.clone(),
                    text_b: b.text_b.clone(),
                    label: Label::Negative,
                    origin: Origin::RecombinedNegative,
                });
                break;
            }
        }
        match made {
            Some(ex) => out.push(ex),
            None => {
                return Err(Error::Data(format!(
                    "no non-colliding negative found after {RECOMBINE_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(out)
}
