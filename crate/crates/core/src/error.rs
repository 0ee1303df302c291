use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum CbrlError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("could not find a solvable puzzle after {attempts} attempts")]
    ExhaustedResample { attempts: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bank is empty")]
    EmptyBank,

    #[error("step {step} outside schedule range 1..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid test counts: passed={passed}, total={total}")]
    InvalidCounts { passed: usize, total: usize },

    #[error("group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),

    #[error("incomplete group {group}: expected {expected} rollouts, found {found}")]
    IncompleteGroup {
        group: usize,
        expected: usize,
        found: usize,
    },

    #[error("sequence of {len} tokens exceeds context window {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CbrlError> = std::result::Result<T, E>;

impl CbrlError {
    pub fn config(msg: impl Into<String>) -> Self {
        CbrlError::InvalidConfig(msg.into())
    }
}
