use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("zero valid lines in interaction source ({malformed} malformed)")]
    NoValidLines { malformed: usize },

    #[error("k-core filter with k={k} removed every interaction")]
    EmptyCore { k: usize },

    #[error("user `{user}` has {count} interactions, leave-one-out needs at least 3")]
    TooFewInteractions { user: String, count: usize },

    #[error("{kind} {index} has no train interactions, normalization is undefined")]
    IsolatedNode { kind: &'static str, index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("id out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("divergent integration: non-finite value after step {step}")]
    DivergentIntegration { step: usize },

    #[error("user {user} has every item as a train positive, no negative can be drawn")]
    NoNegativeCandidate { user: usize },

    #[error("held-out item {target} is in the exclusion set of user {user}")]
    TargetExcluded { user: usize, target: usize },

    #[error("cannot compute metrics over an empty result list")]
    EmptyResults,

    #[error("backward pass requires a recorded forward tape")]
    MissingTape,

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
