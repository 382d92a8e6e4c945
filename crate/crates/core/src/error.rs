use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("design is rank deficient (column {0})")]
    RankDeficient(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("cumulative probabilities are not ordered")]
    OrderViolation,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("finite-difference step left the parameter space after repeated halving")]
    StepTooLarge,
    #[error("IRLS did not converge after {0} iterations")]
    NotConverged(usize),
    #[error("2x2 table has an empty cell")]
    BoundaryCell,
    #[error("division by zero: {0}")]
    DivisionByZero(String),
    #[error("root not bracketed")]
    NoBracket,
}

pub type Result<T> = std::result::Result<T, Error>;
