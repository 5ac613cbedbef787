use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("perturbation norm {norm:e} is below the degeneracy threshold (dead generator output)")]
    DegenerateNorm { norm: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("embedding row {row} has norm {norm}, expected unit norm")]
    NotNormalized { row: usize, norm: f64 },

    #[error("index {index} out of range for {len} slots")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("mask factor {mask_factor} exceeds axis extent {extent}")]
    MaskTooLarge { mask_factor: usize, extent: usize },

    #[error("window [{start}, {end}) lies outside a recording of {len} samples")]
    WindowOutOfBounds { start: usize, end: usize, len: usize },

    #[error("dataset has {got} images, at least {need} are required")]
    DatasetTooSmall { got: usize, need: usize },

    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },

    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    NonFiniteLoss { loss: f64, step: u64, batch: u64 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("unknown subject(s) or empty labeled split: {0}")]
    UnknownSubject(String),

    #[error("k = {k} exceeds the number of classes ({classes})")]
    KTooLarge { k: usize, classes: usize },

    #[error("config parse error in {field}: {message}")]
    ConfigParse { field: String, message: String },

    #[error("io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch { expected: format!("{expected:?}"), got: format!("{got:?}") }
    }
}
