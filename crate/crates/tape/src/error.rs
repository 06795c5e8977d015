use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} does not fit a {rows}x{cols} tensor")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("expected a 1x1 tensor, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("tape already consumed by a backward pass")]
    Consumed,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("non-finite gradient for parameter '{0}'; step rejected")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
