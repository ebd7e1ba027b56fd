use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the forecaster pipeline.
#[derive(Debug, Error)]
pub enum DamError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv at row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("non-monotonic timestamp at row {row}")]
    NonMonotonic { row: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sampling support is empty")]
    EmptySupport,
    #[error("insufficient valid points: need {needed}, support has {available} (short by {})", needed - available)]
    InsufficientPoints { needed: usize, available: usize },
    #[error("normal equations are rank deficient at pivot {pivot}")]
    RankDeficient { pivot: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("backward called on a {0}")]
    Detached(&'static str),
    #[error("non-finite value after layer {layer} ({what})")]
    NonFinite { layer: usize, what: &'static str },
    #[error("window has no unmasked points")]
    FullyMasked,
    #[error("no series has enough history for a context of {needed} points")]
    InsufficientHistory { needed: usize },
    #[error("test split too short: need {needed} steps, have {available}")]
    InsufficientTestLength { needed: usize, available: usize },
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("attention recording was not enabled for this forward pass")]
    RecordingDisabled,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
}

impl DamError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DamError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input (bad files, flags, configs)
    /// rather than an internal failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            DamError::Detached(_) | DamError::NonFinite { .. } | DamError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DamError>;
