use thiserror::Error;

/// Errors raised by the optimization library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonfiniteValue(&'static str),
    #[error("invalid problem constants: {0}")]
    InvalidConstants(String),
    #[error("singular denominator: L_g equals mu_g while the cubic Lipschitz term is nonzero")]
    SingularDenominator,
    #[error("division by zero while computing {0}")]
    DivisionByZero(&'static str),
    #[error("single-evaluation momentum (option II) has no previous sample value")]
    MissingHistory,
    #[error("exact oracle required but unavailable")]
    ExactOracleUnavailable,
    #[error("lower-level Hessian is not symmetric positive definite")]
    NotSpd,
    #[error("dataset `{0}` is empty")]
    EmptyDataset(&'static str),
    #[error("batch size {batch} exceeds the {available} available items")]
    InvalidBatch { batch: usize, available: usize },
    #[error("non-positive value {value} at t = {t}")]
    NonPositiveValue { t: f64, value: f64 },
    #[error("need at least {required} points in the fit window, found {found}")]
    InsufficientPoints { found: usize, required: usize },
    #[error("metric `{0}` is missing from the trajectory records")]
    MissingMetric(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
