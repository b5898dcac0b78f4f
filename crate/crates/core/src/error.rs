use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("volume too small: {0}")]
    TooSmallVolume(String),

    #[error("volume {0} has no content above the border threshold")]
    EmptyVolume(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lesion placement failed: {0}")]
    Placement(String),

    #[error("empty batch: every sample was ignore-labeled")]
    EmptyBatch,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("sensitivity undefined: no ground-truth lesions")]
    NoGroundTruth,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("missing input file: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("malformed {what} at {}:{line}: {message}", path.display())]
    Format {
        what: &'static str,
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(
        what: &'static str,
        path: impl Into<PathBuf>,
        line: usize,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            what,
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput(_) => 2,
            Error::Config { .. } => 3,
            Error::Invariant(_) | Error::Contract(_) => 4,
            Error::NoGroundTruth => 5,
            _ => 1,
        }
    }
}
