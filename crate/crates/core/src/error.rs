use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SpastError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SpastError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("region grid b={b} does not divide the {height}×{width} feature map")]
    Divisibility { b: usize, height: usize, width: usize },

    #[error("feature level mismatch: {0}")]
    LevelMismatch(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("checksum failure: {0}")]
    Checksum(String),

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("wrong container kind: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    #[error("timestep {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("invalid schedule parameters: {0}")]
    ScheduleRange(String),

    #[error("style prior parameters are not frozen: {0}")]
    FrozenViolation(String),

    #[error("non-finite `{term}` loss at step {step} (value {value})")]
    NonFiniteLoss { term: String, step: u64, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {len} regions")]
    IndexOutOfRange { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
