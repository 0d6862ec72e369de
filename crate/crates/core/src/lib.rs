//! Continuous prompt tuning for binary code-intelligence tasks on top of a
//! small masked language model, with zero-shot cross-language evaluation.

pub mod backbone;
pub mod corpus;
mod error;
pub mod evalharness;
pub mod optim;
pub mod prompting;
pub mod tuning;
pub mod verbalizer;

pub use error::{Error, Result};
