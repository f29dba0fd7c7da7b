use std::path::PathBuf;

/// Errors raised across the modelling pipeline.
///
/// The variants line up with the process exit codes used by the CLI, so the
/// classification matters: loading/validation problems, grid planning failures,
/// numerical breakdowns inside the simulator, and optimizer failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("planning failed: {0}")]
    Planning(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("solver failure: {0}")]
    Solver(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
