//! Error type shared across the pipeline.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration (unknown keys, inconsistent dimensions, bad flags).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unreadable input data (scene files, label files, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure while reading or writing artifacts.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A landmark index referenced by a region is out of range.
    #[error("index error: landmark index {index} out of range (have {len})")]
    Index { index: usize, len: usize },

    /// Degenerate or otherwise invalid polygon geometry.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Tensor shape mismatch at a module boundary.
    #[error("shape error in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// Invalid argument to an operation (empty kv, empty answer span, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite value encountered during a forward or backward pass.
    #[error("numeric error in {0}: non-finite value")]
    Numeric(String),

    /// A verification run (gradient check, invariant suite) reported failures.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for the CLI: 2 config, 3 data, 4 numeric, 5 check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Index { .. } | Error::Geometry(_) => 3,
            Error::Shape { .. } | Error::Input(_) => 3,
            Error::Numeric(_) => 4,
            Error::CheckFailed(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
