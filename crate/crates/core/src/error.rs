use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, below the normalization floor")]
    ZeroNormRow { row: usize, norm: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("function returned a non-finite value at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("need at least {needed} classes, found {found}")]
    InsufficientClasses { needed: usize, found: usize },

    #[error("label {label} is out of range for {classes} classes (sample {sample})")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("no positive in gallery for query {query} (label {label})")]
    NoPositiveInGallery { query: usize, label: usize },

    #[error("class means could not be separated after {attempts} attempts")]
    MeanSeparationFailure { attempts: usize },

    #[error("format error at line {line}: {message}")]
    FormatError { line: usize, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("checkpoint decode failed: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; dump written to {dump:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        dump: Option<PathBuf>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Validation failures map to exit status 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::DimensionMismatch(_)
                | Error::InsufficientClasses { .. }
        )
    }
}
