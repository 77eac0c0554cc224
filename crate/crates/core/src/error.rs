use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode failed for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: non-3-channel image ({channels} channels)")]
    NonRgb { path: PathBuf, channels: u8 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable identifier used in CLI error envelopes.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Image { .. } | Error::NonRgb { .. } => "image",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Integrity(_) => "integrity",
            Error::NonFinite { .. } => "non_finite",
            Error::BackendUnavailable(_) => "backend_unavailable",
            Error::Numerical(_) => "numerical",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
