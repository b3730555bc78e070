use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss while probing coordinate {coordinate} of tensor {tensor}")]
    NonFiniteProbe { tensor: usize, coordinate: usize },

    #[error("training diverged in stage {stage} at epoch {epoch} (loss = {loss})")]
    Divergence { stage: u8, epoch: usize, loss: f64 },

    #[error("run {run} (seed {seed}): {error}")]
    Run {
        run: usize,
        seed: u64,
        error: Box<Error>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, left, right }
    }

    /// The failure with any per-run context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Run { error, .. } => error.root(),
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self.root(), Error::Divergence { .. })
    }

    /// True for failures caused by the input data rather than the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Data(_)
                | Error::Format { .. }
                | Error::Csv(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Toml(_)
        )
    }
}
