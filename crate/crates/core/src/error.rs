use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the fingerprinting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid direction value {value} at position {position}; expected -1 or +1")]
    InvalidDirection { position: usize, value: i64 },

    #[error("empty trace")]
    EmptyTrace,

    #[error("label id {id} out of range for {class_count} classes")]
    LabelOutOfRange { id: usize, class_count: usize },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("sample has no positive labels")]
    NoPositiveLabels,

    #[error("non-finite {what} encountered{}", batch.map(|b| format!(" in batch {b}")).unwrap_or_default())]
    NonFinite { what: &'static str, batch: Option<usize> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("generator error: {0}")]
    Generator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
