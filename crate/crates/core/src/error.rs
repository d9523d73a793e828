//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// [`Error::category`] maps each variant onto a short machine-readable tag
/// used by the command-line front end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A matrix or vector entry was NaN or infinite.
    #[error("non-finite value at {context} index {index}")]
    NonFinite { context: &'static str, index: usize },

    /// Dimensions did not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Design matrix handed to the LASSO solver was not z-scored.
    #[error("column {column} is not standardized (sample std {std})")]
    NotStandardized { column: usize, std: f64 },

    /// Token sequence does not fit the model context window.
    #[error("sequence of length {len} exceeds context window {max}")]
    ContextOverflow { len: usize, max: usize },

    /// Training produced a non-finite loss. Carries the losses recorded
    /// before the failing step.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        partial_losses: Vec<f64>,
    },

    /// Dataset construction or ingestion failed.
    #[error("dataset: {0}")]
    Dataset(String),

    /// A JSONL line could not be parsed.
    #[error("{path}:{line}: {message}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A binary tensor dump was malformed.
    #[error("tensor dump: {0}")]
    Format(String),

    /// Configuration file problems.
    #[error("config: {0}")]
    Config(String),

    /// A required input file was absent.
    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },

    /// The output directory is held by another run.
    #[error("output directory locked: {0}")]
    Locked(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short, stable tag describing the failure class.
    pub fn category(&self) -> &'static str {
        match self {
            Error::NonFinite { .. } | Error::Shape(_) | Error::NotStandardized { .. } => "numerics",
            Error::InvalidArgument(_) => "argument",
            Error::ContextOverflow { .. } => "context",
            Error::Diverged { .. } => "training",
            Error::Dataset(_) | Error::Jsonl { .. } => "dataset",
            Error::Format(_) => "format",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Missing { .. } => "missing",
            Error::Locked(_) => "locked",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
