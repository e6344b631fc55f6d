use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes that must agree do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Caller-supplied data is unusable (empty, too small, out of range).
    #[error("invalid input: {0}")]
    Input(String),

    /// Incompatible or out-of-range configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Operation called on an object that is not ready for it.
    #[error("invalid state: {0}")]
    State(String),

    /// A loss or gradient stopped being finite during training.
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    /// Any other numeric failure (zero vectors, degenerate statistics).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of numerical origin rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
