use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands disagree on shape.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A shape is malformed for the requested construction or op.
    InvalidShape { op: &'static str, shape: Vec<usize> },
    /// Index (token id, row, column range) outside its bound.
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// Backward was requested from a non-scalar node.
    NotScalar(Vec<usize>),
    /// Every loss position was masked out.
    EmptyLoss,
    /// Invalid hyperparameter for an op (kernel size, segments, ...).
    Config(String),
    /// Registry lookup or construction failure.
    Registry(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: dimension mismatch between {left:?} and {right:?}")
            }
            Self::InvalidShape { op, shape } => write!(f, "{op}: invalid shape {shape:?}"),
            Self::OutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            Self::NotScalar(shape) => write!(f, "backward needs a scalar loss, got shape {shape:?}"),
            Self::EmptyLoss => write!(f, "loss is empty: every position is masked out"),
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Registry(msg) => write!(f, "registry error: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;
