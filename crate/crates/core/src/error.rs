use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the merging laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments violating its preconditions
    /// (shape mismatch, out-of-range token, wrong coefficient count, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where only finite values are admitted.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Two parameter sets that must share a manifest do not.
    #[error("manifest mismatch: expected {expected}, found {found}")]
    ManifestMismatch { expected: String, found: String },

    /// A task rule or transformation name that the generators do not know.
    #[error("unknown task rule `{0}`")]
    UnknownRule(String),

    /// An iterative procedure ran out of iterations.
    #[error("did not converge: {0}")]
    Convergence(String),

    /// A metric is undefined for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid file format: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that the command line maps to exit code 1
    /// (numeric blow-ups and convergence failures).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Convergence(_))
    }
}
