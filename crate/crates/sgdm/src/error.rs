use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sgdm_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Format(String),
    /// Invalid user input: bad configuration, flags or file references.
    #[error("{0}")]
    Validation(String),
    #[error("non-finite loss {loss} at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: u64, epoch: usize, loss: f32 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether the error stems from user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_) => true,
            Error::Core(e) => matches!(
                e,
                sgdm_core::Error::InvalidConfig(_) | sgdm_core::Error::InvalidSchedule(_) | sgdm_core::Error::GuidanceMismatch(_)
            ),
            _ => false,
        }
    }
}

pub fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
