use std::path::Path;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A domain precondition or invariant was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file exists but its contents are not a valid gaff artifact
    /// (bad magic, unsupported version, truncation, corrupt records).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// The operating system refused an I/O operation.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code convention: 1 for validation/domain/format errors,
    /// 2 for operating-system I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
