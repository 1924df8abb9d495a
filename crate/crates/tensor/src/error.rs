use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("domain error in {op}: non-positive input {value} at index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op} needs a non-empty input")]
    Empty { op: &'static str },
    #[error("backward seed must be a scalar, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,
    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    Determinism { first: f64, second: f64 },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    Step(f64),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
