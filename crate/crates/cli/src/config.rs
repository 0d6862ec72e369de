use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use promptcode::backbone::{EncoderConfig, PretrainConfig};
use promptcode::corpus::{DialectLayout, DialectSpec};
use promptcode::evalharness::{AblationGrid, Protocol, RunSetup};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::Failure;

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(Failure::Input)?;
    toml::from_str(&text)
        .map_err(|e| Failure::Input(anyhow!("invalid config {}: {e}", path.display())))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub dialect: Option<DialectSection>,
    pub raw: Option<RawSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialectSection {
    #[serde(default)]
    pub spec: Option<DialectSpec>,
    #[serde(default)]
    pub layout: DialectLayout,
}

impl DialectSection {
    /// The spec, with `program_count` defaulting to what the layout needs.
    pub fn spec(&self) -> DialectSpec {
        self.spec.clone().unwrap_or_else(|| DialectSpec {
            program_count: self.layout.required_programs(),
            ..DialectSpec::default()
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSection {
    pub input: PathBuf,
    pub language: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub strip_comments: bool,
    pub min_tokens: Option<usize>,
    pub max_tokens: Option<usize>,
    #[serde(default = "tenth")]
    pub validation_fraction: f64,
    #[serde(default = "tenth")]
    pub test_fraction: f64,
}

fn yes() -> bool {
    true
}

fn tenth() -> f64 {
    0.1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFile {
    #[serde(default = "default_backbone")]
    pub output: PathBuf,
    /// JSONL file of `{id, language, text}` snippets.
    pub corpus: Option<PathBuf>,
    pub dialect: Option<DialectSection>,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

fn default_backbone() -> PathBuf {
    PathBuf::from("backbone.bin")
}

/// Encoder shape; `vocab_size` always comes from the tokenizer.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_sequence_length: usize,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let m = EncoderConfig::miniature(0, 0);
        EncoderSection {
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            num_layers: m.num_layers,
            max_sequence_length: m.max_sequence_length,
            seed: m.seed,
        }
    }
}

impl EncoderSection {
    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            max_sequence_length: self.max_sequence_length,
            vocab_size: 0,
            seed: self.seed,
        }
    }
}

/// Shared by `train`, `eval` and `ablate`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub backbone: PathBuf,
    pub protocol: Protocol,
    pub data: DataSection,
    #[serde(default)]
    pub setup: RunSetup,
    /// Prompt checkpoint read by `eval`; written by `train`.
    pub checkpoint: Option<PathBuf>,
    pub grid: Option<AblationGrid>,
}

/// Each entry is a path prefix; `.train.jsonl`, `.validation.jsonl` and
/// `.test.jsonl` are appended.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: PathBuf,
    pub target: Option<PathBuf>,
    /// Extra source datasets for ablations over source languages, keyed by
    /// language tag.
    #[serde(default)]
    pub sources: std::collections::BTreeMap<String, PathBuf>,
}
