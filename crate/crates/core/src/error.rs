use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: edge references undeclared node {node}")]
    UndeclaredNode { line: usize, node: String },

    #[error("line {line}: illegal kind pair {a}-{b}")]
    IllegalKindPair { line: usize, a: String, b: String },

    #[error("line {line}: non-positive count {count}")]
    NonPositiveCount { line: usize, count: f64 },

    #[error("zero marginal count for node {0}")]
    ZeroMarginal(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("zero-norm vector: cosine similarity undefined")]
    ZeroNorm,

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch of {batch} is too small for {negatives} negatives")]
    BatchTooSmall { batch: usize, negatives: usize },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn malformed(line: usize, message: impl Into<String>) -> Self {
        Error::Malformed { line, message: message.into() }
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFiniteGradient(_))
    }
}
