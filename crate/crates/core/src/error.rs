use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    Format(String),

    #[error("numeric error{}: {message}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numeric { message: String, iteration: Option<usize> },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("training failure: reached {achieved:.4} training accuracy, floor is {required:.4}")]
    TrainingFailure { achieved: f64, required: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            message: message.into(),
            iteration: None,
        }
    }

    /// Attaches the training iteration to a numeric error.
    pub fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::Numeric { message, .. } => Error::Numeric {
                message,
                iteration: Some(iteration),
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Numeric { .. } => 3,
            _ => 1,
        }
    }
}
