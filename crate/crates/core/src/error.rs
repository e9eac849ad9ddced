use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the multi-domain stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("routing error: unknown domain id {0}")]
    UnknownDomain(usize),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("NaN loss for domain {domain} at update {update}")]
    NanLoss { domain: usize, update: usize },

    #[error("parse error in {source_name}: {detail}")]
    Parse { source_name: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Process exit codes used by the command-line front end.
pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const AUDIT: u8 = 3;
    pub const NAN_ABORT: u8 = 4;
}

impl Error {
    /// Exit code a command should return when it fails with this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::UnknownDomain(_) => exit::CONFIG,
            Error::NanLoss { .. } | Error::NonFinite { .. } => exit::NAN_ABORT,
            _ => exit::FAILURE,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
