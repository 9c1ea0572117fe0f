use crate::state::{FrameDescriptor, StateKey};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed text in an input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Syntactically valid record whose content is unacceptable
    /// (non-PSD information block, non-unit quaternion, ...).
    #[error("invalid record at line {line}: {msg}")]
    InvalidRecord { line: usize, msg: String },

    #[error("rotation too close to gimbal lock")]
    DegenerateRotation,

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("not converged after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("missing entity {0}")]
    MissingEntity(StateKey),

    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    #[error("information block of removed entries is singular")]
    SingularMarginalization,

    #[error("frames differ: {0} vs {1}")]
    FrameMismatch(FrameDescriptor, FrameDescriptor),

    #[error("maps not joinable: {0}")]
    NotJoinable(String),

    #[error("common features are collinear")]
    DegenerateCommonSet,

    #[error("join step {step} failed: {source}")]
    JoinStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The innermost error, looking through `JoinStep` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::JoinStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// Line number for errors raised by the file readers.
    pub fn line(&self) -> Option<usize> {
        match self {
            Error::Parse { line, .. } | Error::InvalidRecord { line, .. } => Some(*line),
            _ => None,
        }
    }
}
