use thiserror::Error;

use crate::tape::Label;

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
    #[error("hook refers to unknown label {0:?}")]
    UnknownLabel(Label),
    #[error("label {0:?} registered twice on one tape")]
    DuplicateLabel(Label),
    #[error("hook for {label:?} targets row {row}, node has {rows} rows")]
    HookRow {
        label: Label,
        row: usize,
        rows: usize,
    },
    #[error("replacement for {label:?} has width {got}, expected {expected}")]
    HookWidth {
        label: Label,
        got: usize,
        expected: usize,
    },
    #[error("backward seed must be a scalar node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not exist on this tape")]
    UnknownNode(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
