use thiserror::Error;

use crate::NodeId;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}")]
    InvalidShape { op: &'static str, shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("tensor has {got} values but shape {shape:?} needs {expected}")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor is not recorded on this tape")]
    NotOnTape,
    #[error("node {0} already carries a step-boundary mark")]
    AlreadyMarked(NodeId),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;
