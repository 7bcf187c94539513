use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("index {index} out of range (len {len}) in {what}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{0}")]
    Model(String),

    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),

    #[error("template {template_id}: {reason}")]
    Template { template_id: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric {metric}: {reason}")]
    Metric {
        metric: &'static str,
        reason: String,
    },

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),

    #[error(
        "config hash mismatch: {stage} was produced with {found}, current config is {expected}"
    )]
    HashMismatch {
        stage: String,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn metric(metric: &'static str, reason: impl Into<String>) -> Self {
        Error::Metric {
            metric,
            reason: reason.into(),
        }
    }
}
