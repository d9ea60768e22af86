use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// The variants map onto the CLI exit codes: capacity guards exit 2, bad
/// input exits 3 and numerical aborts exit 4.
#[derive(Debug, Error)]
pub enum FhmmError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("capacity exceeded: {what} = {actual} exceeds the bound {bound}")]
    Capacity {
        what: &'static str,
        actual: f64,
        bound: f64,
    },

    #[error("numerical failure at t = {t} in {variable}: {detail}")]
    Numerical {
        t: usize,
        variable: &'static str,
        detail: String,
    },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl FhmmError {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            FhmmError::Capacity { .. } => 2,
            FhmmError::Numerical { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FhmmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        FhmmError::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FhmmError>;
