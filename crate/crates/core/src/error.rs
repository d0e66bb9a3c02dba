use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid study record {index}: {reason}")]
    InvalidStudy { index: usize, reason: String },

    #[error("n ≥ {need} required, got {got} studies")]
    TooFewStudies { got: usize, need: usize },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("selection denominator vanishes (tau = 0 with |rho| = 1)")]
    DegenerateDenominator,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empirical likelihood constraints are infeasible at alpha = {alpha}")]
    Infeasible { alpha: f64 },

    #[error("numerical Hessian has non-finite entries at {0:?}")]
    NonFiniteHessian(Vec<(usize, usize)>),

    #[error("observed information matrix is singular or not positive definite")]
    SingularInformation,

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}
