use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or kernel dimension disagrees with what an operation needs.
    #[error("{context}: {axis} mismatch (expected {expected}, got {actual})")]
    Shape {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{context}: {axis} extent {extent} exceeds padded input extent {padded}")]
    Geometry {
        context: &'static str,
        axis: &'static str,
        extent: usize,
        padded: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed {kind}: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for validation failures, 2 for IO failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(
    context: &'static str,
    axis: &'static str,
    expected: usize,
    actual: usize,
) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            axis,
            expected,
            actual,
        })
    }
}
