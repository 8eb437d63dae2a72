use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("matmul inner dimension mismatch: {lhs:?} x {rhs:?}")]
    InnerDim { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("index {index} out of range for extent {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("attention row {row} has no attendable position")]
    AllMaskedRow { row: usize },

    #[error("sequence length {len} exceeds positional capacity {capacity}")]
    PositionCapacity { len: usize, capacity: usize },

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("no trainable parameters remain after freezing")]
    EmptyTrainableSet,

    #[error("dimension {dim} is not divisible by {factor}")]
    Indivisible { dim: usize, factor: usize },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("insufficient samples for {metric}: need {need}, got {got}")]
    InsufficientSamples {
        metric: &'static str,
        need: usize,
        got: usize,
    },

    #[error("matrix square root failed: {0}")]
    MatrixSqrt(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("stage {stage} requires a stage-{prev} manifest")]
    MissingProvenance { stage: u8, prev: u8 },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            reason: reason.into(),
        }
    }
}
