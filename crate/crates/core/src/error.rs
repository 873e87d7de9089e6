use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CtegError>;

#[derive(Debug, Error)]
pub enum CtegError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON, line {line}: {message}")]
    MalformedJson { line: usize, message: String },

    #[error("{message}, line {line}")]
    InvalidInstance { line: usize, message: String },

    #[error("invalid instance: {0}")]
    Instance(String),

    #[error("unknown relation label {label:?}, line {line}")]
    UnknownRelation { line: usize, label: String },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0} called on non-scalar tensor")]
    NotScalar(&'static str),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("operation not available in {mode} mode: {what}")]
    WrongMode { mode: String, what: &'static str },
}

impl CtegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CtegError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used in the CLI's machine-readable error object.
    pub fn kind(&self) -> &'static str {
        match self {
            CtegError::Io { .. } => "io",
            CtegError::MalformedJson { .. } => "malformed_json",
            CtegError::InvalidInstance { .. } | CtegError::Instance(_) => "invalid_instance",
            CtegError::UnknownRelation { .. } => "unknown_relation",
            CtegError::ShapeMismatch { .. } => "shape_mismatch",
            CtegError::NotScalar(_) => "not_scalar",
            CtegError::EmptyInput(_) => "empty_input",
            CtegError::Sampling(_) => "sampling",
            CtegError::Template(_) => "template",
            CtegError::Config(_) => "config",
            CtegError::Checkpoint(_) => "checkpoint",
            CtegError::IndexOutOfRange { .. } => "index_out_of_range",
            CtegError::WrongMode { .. } => "wrong_mode",
        }
    }
}
