use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("softmax row has no unmasked entries")]
    AllMasked,

    #[error("non-finite gradient in parameter `{name}` at index {index}")]
    NonFiniteGradient { name: String, index: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("count-collapsed forward requires dropout = 0 (got {0})")]
    DropoutOnFastPath(f64),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid sentence on line {line}: {reason}")]
    Dataset {
        line: usize,
        reason: crate::data::InvalidSentence,
    },

    #[error("head output is undefined: the intervened attention row has zero total weight")]
    EmptyAttention,

    #[error("counts with n0 + n1 = 0 lie outside the minimal construction's validity region")]
    OutsideValidity,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
