use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{op}: division by exact zero")]
    DivisionByZero { op: &'static str },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("{op}: batch of {batch} is too small (need at least {min})")]
    BatchTooSmall {
        op: &'static str,
        batch: usize,
        min: usize,
    },

    #[error("correlation needs at least 2 channels, got {0}")]
    TooFewChannels(usize),

    #[error("pearson: sequences differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("pearson: need at least 2 observations, got {0}")]
    TooFewSamples(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown stage {stage} (model has {stages} stages)")]
    UnknownStage { stage: usize, stages: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("{format}: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{format}: truncated input (need {needed} bytes, have {available})")]
    Truncated {
        format: &'static str,
        needed: u64,
        available: u64,
    },

    #[error("checkpoint was written for a different model spec")]
    DigestMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    /// True for failures caused by NaN/Inf appearing in a computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
