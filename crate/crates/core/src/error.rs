use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("non-finite value produced by node {node} ({kind})")]
    NonFinite { node: usize, kind: &'static str },

    #[error("image codec error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// An I/O error that names the file involved.
    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short stable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config { .. } => "config",
            Error::Protocol(_) => "protocol",
            Error::Checkpoint(_) => "checkpoint",
            Error::Manifest { .. } => "manifest",
            Error::NonFinite { .. } => "non-finite",
            Error::Image { .. } => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors the command line reports as usage/config problems
    /// (exit code 2) rather than runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Protocol(_) | Error::InvalidArgument(_)
        )
    }
}
