use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("attention row {row} has every key masked")]
    FullyMaskedRow { row: usize },

    #[error("expected a {expected}-dimensional frame, got {got}")]
    FrameWidth { expected: usize, got: usize },

    #[error("short-term memory is empty")]
    EmptyMemory,

    #[error("sequence has {len} steps but the short-term memory needs {needed}")]
    SequenceTooShort { len: usize, needed: usize },

    #[error("label {label} at step {step} is outside 0..={max}")]
    LabelOutOfRange { step: usize, label: usize, max: usize },

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("no positive frames to rank")]
    NoPositives,

    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("parameter `{0}` missing from checkpoint")]
    MissingParam(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::model::ModelParams>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, left, right }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
