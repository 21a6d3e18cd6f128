use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("input shape {input:?} is incompatible with {arch}: {reason}")]
    IncompatibleInput {
        arch: String,
        input: Vec<usize>,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("incongruent masks: {0}")]
    Incongruent(String),

    #[error("empty pruning scope: {0}")]
    EmptyScope(String),

    #[error("structured pruning needs a tensor of rank >= 2, layer `{layer}` has rank {rank}")]
    StructuredRank { layer: String, rank: usize },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{failed} job(s) failed: {names:?}")]
    JobsFailed { failed: usize, names: Vec<String> },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
