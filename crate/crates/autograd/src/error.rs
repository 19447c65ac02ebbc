use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("value length {len} does not match shape {shape:?}")]
    ValueLength { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, AutogradError>;
