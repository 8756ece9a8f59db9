//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("average spiking rate is undefined before the first timestep")]
    UndefinedAsr,

    #[error("fixed-point solver did not converge after {iters} iterations (last residual {last_residual:e})")]
    NonConvergence {
        iters: usize,
        last_residual: f64,
        residual_history: Vec<f64>,
    },

    #[error("Neumann series diverged: tail norm grew for {0} consecutive terms")]
    SpectralRadius(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Checkpoint(_) => 2,
            Error::NonConvergence { .. } | Error::SpectralRadius(_) => 3,
            Error::Io { .. } => 4,
            _ => 1,
        }
    }
}
