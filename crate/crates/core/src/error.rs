use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label {value} at ({row}, {col}) for {classes} classes")]
    InvalidLabel {
        value: u8,
        row: usize,
        col: usize,
        classes: usize,
    },

    #[error("invalid threshold {0}: must lie in [0, 1]")]
    InvalidThreshold(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("input too small: {height}x{width}, need at least {min}x{min}")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid combination: {0}")]
    InvalidCombination(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss {0}")]
    NonFinite(f64),

    #[error("ingestion error for `{stem}`: {reason}")]
    Ingestion { stem: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("i/o error on {path}: {error}")]
    Io {
        path: PathBuf,
        error: std::io::Error,
    },

    #[error("image error on {path}: {error}")]
    Image {
        path: PathBuf,
        error: image::ImageError,
    },

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, error: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidInput(_)
                | Error::ConfigParse(_)
                | Error::ConfigMismatch(_)
                | Error::InvalidCombination(_)
                | Error::InvalidThreshold(_)
                | Error::Ingestion { .. }
                | Error::Checkpoint { .. }
                | Error::CheckpointVersion { .. }
                | Error::InputTooSmall { .. }
                | Error::Image { .. }
        )
    }
}
