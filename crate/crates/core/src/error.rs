use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrbcError>;

#[derive(Debug, Error)]
pub enum DrbcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient history: need {required} steps, have {available}")]
    InsufficientHistory { required: usize, available: usize },

    #[error("non-finite integrand value {value} at node {node:?}")]
    NonFiniteEvaluation { node: Vec<f64>, value: f64 },

    #[error("root bracket expansion failed after {doublings} doublings")]
    BracketFailure { doublings: usize },

    #[error("degenerate gradient norm: {0}")]
    DegenerateGradient(f64),

    #[error("variance undefined for {0} atom(s)")]
    VarianceUndefined(usize),

    #[error("infeasible target return {target}: max achievable robust return is {max_robust_return}")]
    Infeasible { target: f64, max_robust_return: f64 },

    #[error("zero return variance with nonzero mean excess return {0}")]
    ZeroVariance(f64),

    #[error("time {0} is not on the price grid")]
    OffGrid(f64),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DrbcError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DrbcError::InvalidInput(msg.into())
    }
}
