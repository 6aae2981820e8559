use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; `field` is a dotted path such as `trainer.group_size`.
    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("empty conversation")]
    EmptyConversation,

    #[error("degenerate group: need at least 2 rewards, got {0}")]
    DegenerateGroup(usize),

    #[error("support mismatch: {0} vs {1} categories")]
    SupportMismatch(usize, usize),

    #[error("unbounded KL: p[{0}] > 0 but q[{0}] = 0")]
    UnboundedKl(usize),

    #[error("non-finite gradient at step {step}: {dump}")]
    NonFiniteGradient { step: u64, dump: String },

    #[error("empty {0} pool")]
    EmptyPool(&'static str),

    #[error("chunk `{0}` is not indexed")]
    UnindexedChunk(String),

    #[error("service error for {context}: {message}")]
    Service { context: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Service,
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn service(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Service {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } => ErrorClass::Usage,
            Error::Service { .. } => ErrorClass::Service,
            _ => ErrorClass::Data,
        }
    }
}
