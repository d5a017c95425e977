use std::path::PathBuf;

/// Errors raised anywhere in the colorization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{axis} length {len} is not divisible by the codec factor {factor}")]
    NotDivisible {
        axis: &'static str,
        len: usize,
        factor: usize,
    },

    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("unknown instance id `{0}`")]
    UnknownInstance(String),

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("unknown scene segmentation backend `{0}`")]
    UnknownBackend(String),

    #[error("unknown ablation `{0}`")]
    UnknownAblation(String),

    #[error("timestep {t} out of range for a {steps}-step schedule")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("non-finite loss at step {step}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidValue(msg.into())
}

pub(crate) fn mismatch(axis: impl Into<String>, expected: usize, actual: usize) -> Error {
    Error::ShapeMismatch {
        axis: axis.into(),
        expected,
        actual,
    }
}
