use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the planning, control and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("derivative order {requested} exceeds supported maximum {max}")]
    UnsupportedOrder { requested: usize, max: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate steady-state problem: {parameter} is critical, supply a free amplitude")]
    DegenerateProfile { parameter: String },

    #[error("boundary data {0} is inconsistent with the degenerate steady-state problem")]
    InconsistentBoundary(String),

    #[error("{what} did not converge: {detail}")]
    NonConvergence { what: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("kernel cache missing for backstepping mode; run `formation precompute` first ({0})")]
    KernelCacheMissing(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 2,
            Error::Io { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
