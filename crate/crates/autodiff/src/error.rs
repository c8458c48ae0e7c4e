use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range in {op} (extent {extent})")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
