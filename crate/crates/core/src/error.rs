use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient snapshots: {0}")]
    InsufficientSnapshots(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: &str, reason: &str) -> Self {
        Error::Validation {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            Error::Numerical(_) => 3,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}
