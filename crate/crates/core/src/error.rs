use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the library.
///
/// Variants fall into three classes (see [`Error::class`]) which the CLI maps
/// onto its exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: &'static str, row: usize },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "rank deficient: {context} (observed rank {rank}{})",
        point.map(|p| format!(", point {p}")).unwrap_or_default()
    )]
    RankDeficient {
        context: String,
        rank: usize,
        point: Option<usize>,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::DimensionMismatch { .. }
            | Error::NonFinite { .. }
            | Error::Parse { .. }
            | Error::Io { .. } => ErrorClass::Data,
            Error::RankDeficient { .. } | Error::Singular(_) | Error::NonConvergence(_) => {
                ErrorClass::Numerical
            }
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Attaches a global point index to a rank-deficiency error.
    pub(crate) fn at_point(self, index: usize) -> Self {
        match self {
            Error::RankDeficient { context, rank, .. } => Error::RankDeficient {
                context,
                rank,
                point: Some(index),
            },
            other => other,
        }
    }
}
