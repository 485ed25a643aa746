use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed NPY magic, header or payload.
    #[error("malformed NPY data: {0}")]
    Format(String),

    #[error("unsupported NPY dtype '{found}' (expected '{expected}')")]
    UnsupportedDtype { found: String, expected: &'static str },

    /// The manifest (or a detector sidecar) does not match the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A loaded array violates a bundle invariant.
    #[error("validation failed for {file}: {reason}")]
    Validation { file: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A synthetic generator could not establish the property it promises.
    #[error("generator self-check failed: {0}")]
    Generator(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(file: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            file: file.into(),
            reason: reason.into(),
        }
    }

    /// Wraps the error with a description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
