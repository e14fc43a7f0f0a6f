use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("path error: {path}: {reason}")]
    Path { path: PathBuf, reason: String },

    #[error("dataset structure error: {0}")]
    Structure(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch} (batch seed {batch_seed:#018x}): {detail}")]
    Divergence {
        epoch: usize,
        batch_seed: u64,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for invalid input or configuration, 2 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Path { .. }
            | Error::Structure(_)
            | Error::Capacity(_)
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Integrity(_) => 1,
            Error::Numeric(_)
            | Error::Divergence { .. }
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Image(_)
            | Error::Json(_) => 2,
        }
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
