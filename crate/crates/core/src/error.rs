use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Runtime,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 1,
            ErrorCategory::Runtime => 2,
            ErrorCategory::Io => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("normalization mode: {0}")]
    Mode(String),

    #[error("degenerate variance in channel {channel} (batch of {count}, epsilon {epsilon})")]
    DegenerateVariance { channel: usize, count: usize, epsilon: f64 },

    #[error("stale or mismatched forward cache: {0}")]
    StaleCache(String),

    #[error("training diverged: non-finite loss at {0}")]
    Divergence(String),

    #[error("partition: {0}")]
    Partition(String),

    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: u64,
        column: u64,
        message: String,
    },

    #[error("config line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model file: {0}")]
    Format(String),

    #[error("gradient check: {0}")]
    GradCheck(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::ConfigParse { .. } => ErrorCategory::Config,
            Error::Io { .. } | Error::Parse { .. } | Error::Format(_) => ErrorCategory::Io,
            _ => ErrorCategory::Runtime,
        }
    }

    /// Name of the subsystem the error originated from.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::InvalidArgument(_) => "tensor-nn",
            Error::Mode(_) | Error::DegenerateVariance { .. } | Error::StaleCache(_) => "normalization",
            Error::Divergence(_) => "fed-protocol",
            Error::GradCheck(_) => "gradcheck",
            Error::Partition(_) | Error::Parse { .. } => "data-partition",
            Error::Config { .. } | Error::ConfigParse { .. } => "config",
            Error::Io { .. } => "io",
            Error::Format(_) => "model-io",
        }
    }
}
