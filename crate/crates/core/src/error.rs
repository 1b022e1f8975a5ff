use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdmnError {
    #[error("reference tensor is degenerate on the projector range (rank {rank} < {expected})")]
    DegenerateReference { rank: usize, expected: usize },
    #[error("matrix is not a proper rotation (orthogonality defect {defect:e})")]
    NotARotation { defect: f64 },
    #[error("tensor is singular on its class subspace (min eigenvalue {min_eigenvalue:e})")]
    SingularOnSubspace { min_eigenvalue: f64 },
    #[error("phases differ in kinematic class or role")]
    PhaseClassMismatch,
    #[error("phase contrast is not invertible")]
    NonInvertibleContrast,
    #[error("effective tensor is singular (relative min eigenvalue {relative_min_eigenvalue:e}): {reason}")]
    SingularEffective { relative_min_eigenvalue: f64, reason: String },
    #[error("block weights sum to zero")]
    DegenerateBlock,
    #[error("expected {expected} {what}, got {got}")]
    BadParameterLength { what: &'static str, expected: usize, got: usize },
    #[error("{name} = {value} outside its admissible interval")]
    BadInterval { name: &'static str, value: f64 },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid layered spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite gradient at node {node}")]
    NonFiniteGradient { node: usize },
    #[error("dataset has {got} records, need at least {needed}")]
    DatasetTooSmall { got: usize, needed: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("line search failed after {halvings} halvings at iteration {iteration}")]
    LineSearchFailed { iteration: usize, halvings: usize },
    #[error("singular saddle-point system in block {group}")]
    SingularSystem { group: usize },
    #[error("reference table misses load {load} at rate {rate}")]
    ReferenceMismatch { load: usize, rate: f64 },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FdmnError {
    fn from(e: std::io::Error) -> Self {
        FdmnError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FdmnError>;
