use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("negative variance in BN layer {layer}")]
    NegativeVariance { layer: usize },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// Errors caused by user input (bad config, missing files, unknown ids)
    /// rather than by a failing computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Manifest(_)
                | Error::Load { .. }
                | Error::EmptyDataset
                | Error::NotFound(_)
                | Error::Partition(_)
        )
    }
}
