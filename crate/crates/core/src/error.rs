//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input text (carries the 1-based line number).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An argument or precondition violation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A data-processing step produced no usable rows.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// A dataset is present but unusable (e.g. a treatment arm is missing).
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    /// Iterative training diverged.
    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// Model fitting failed outright.
    #[error("fit error: {0}")]
    Fit(String),

    /// A keyed lookup (query, document) had no entry.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// A serialized artifact had the wrong header or shape.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
