use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("population has no clusters")]
    EmptyPopulation,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cluster `{cluster}` unit {unit}: treatment value {value} is not 0 or 1")]
    NonBinaryTreatment { cluster: String, unit: usize, value: f64 },

    #[error("cluster `{cluster}` unit {unit}: missing or non-finite value in {field}")]
    MissingValue { cluster: String, unit: usize, field: &'static str },

    #[error("duplicate cluster id `{0}`")]
    DuplicateCluster(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("root solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("no intercept solved for cluster `{cluster}` at alpha = {alpha}")]
    MissingIntercept { cluster: String, alpha: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("cluster `{0}` has zero propensity density for its observed treatment")]
    ZeroDensity(String),

    #[error("weight {0} is not strictly positive")]
    NonPositiveWeight(f64),

    #[error("score outer-product matrix B11 is singular even after ridge regularisation")]
    SingularB11,

    #[error("too few points: {points} points cannot form {clusters} clusters")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}
