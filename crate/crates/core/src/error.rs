use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EmoeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EmoeError {
    #[error("empty shape")]
    EmptyShape,

    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("chain exhausted: timestep {t} already equals T = {steps}")]
    ChainExhausted { t: usize, steps: usize },

    #[error("timestep {t} out of range 0..={steps}")]
    TimestepRange { t: usize, steps: usize },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("separate mode is only legal at the separation layer ({0})")]
    SeparateNotAllowed(&'static str),

    #[error("cannot parse prompt {0:?}")]
    UnparseablePrompt(String),

    #[error("degenerate ensemble: every uncertainty is zero")]
    DegenerateEnsemble,

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl EmoeError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        EmoeError::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EmoeError::InvalidArgument(msg.into())
    }
}
