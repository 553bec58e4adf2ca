//! Crate-level error type and process exit-code mapping.

use crate::tensor::TensorError;

/// Unified error for the library and CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration: unknown JSON keys, invalid hyperparameters,
    /// contradictory flags.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (files, headers, shapes).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: non-finite loss, divergence, shape errors deep in
    /// the math.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// data/O errors, 4 for numerical failures. 0 is success; clap reserves
    /// its own codes for usage errors before we run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) | Error::Tensor(_) => 4,
        }
    }

    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
