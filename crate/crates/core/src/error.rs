use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the prompt-tuning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenId { id: u32, vocab_size: usize },

    #[error("prompt slot {slot} out of range for prompt table with {rows} rows")]
    PromptSlot { slot: usize, rows: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing split: {0}")]
    MissingSplit(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
