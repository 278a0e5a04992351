use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab pipeline.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate doc_id '{doc_id}' at line {line}")]
    DuplicateDocId { doc_id: String, line: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("controller {kind}: requested k={requested} but only {available} candidates available (shortfall {})", requested - available)]
    Shortfall {
        kind: String,
        requested: usize,
        available: usize,
    },

    #[error("invalid controller spec: {0}")]
    InvalidControllerSpec(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("negative impact {0}")]
    NegativeImpact(f64),

    #[error("k must be positive")]
    InvalidK,

    #[error("non-finite loss at step {step}: contrastive={contrastive} flops_q={flops_q} flops_d={flops_d}")]
    NonFiniteLoss {
        step: usize,
        contrastive: f64,
        flops_q: f64,
        flops_d: f64,
    },

    #[error("no query has a relevant judgment")]
    NoJudgedQueries,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least 2 paired observations, got {0}")]
    TooFewObservations(usize),

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("config field '{field}': {message}")]
    Config { field: String, message: String },
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        LabError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
