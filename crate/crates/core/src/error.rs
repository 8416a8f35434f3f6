use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape violated an operation's contract.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// NaN or infinity surfaced in a loss, activation or gradient.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("genotype: {0}")]
    Genotype(String),

    #[error("parse error at {position}: {reason}")]
    Parse { position: String, reason: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::Config { .. } => "config",
            Error::Genotype(_) => "genotype",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Internal(_) => "internal",
        }
    }
}
