use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("corpus produced an empty vocabulary")]
    EmptyVocabulary,

    #[error("invalid event on line {line}: {reason}")]
    InvalidEvent { line: usize, reason: String },

    #[error("embedding file format error on line {line}: {reason}")]
    EmbeddingFormat { line: usize, reason: String },

    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("content counts are empty; inactive periods must be skipped")]
    EmptyContent,

    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("user {0} has no active periods")]
    NoActivePeriods(usize),

    #[error("unknown user {0}")]
    UnknownUser(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid hyperparameter {name}: {reason}")]
    InvalidHyperParam { name: &'static str, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ablation flags must be applied one at a time")]
    CombinedAblation,

    #[error("content attribute {0} has a zero-norm factor row")]
    DegenerateAttribute(usize),

    #[error("no intruder candidate satisfies the constraints for attribute {0}")]
    NoIntruder(usize),

    #[error("response for attribute {attribute} names token {token:?} which is not in the item")]
    InvalidResponse { attribute: usize, token: String },

    #[error("new user has no consumption traces; use cold start instead")]
    EmptyTraces,

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
