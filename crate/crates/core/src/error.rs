use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid interval [{lo}, {hi}]: upper end must exceed lower end")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("point {value} lies outside the domain [{lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },

    #[error("non-finite value encountered at {location}")]
    NonFinite { location: f64 },

    #[error("singular local design: {0}")]
    SingularDesign(String),

    #[error("rank-deficient local fit at ({s}, {u}): {pairs} effective pairs within bandwidth")]
    RankDeficient { s: f64, u: f64, pairs: usize },

    #[error("no subjects shared between the two inputs")]
    EmptyPairing,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("covariance carries no signal: all eigenvalues are zero")]
    NoSignal,

    #[error("score covariance is ill-conditioned (condition {condition:e}); consider a nonzero noise variance")]
    IllConditioned { condition: f64 },

    #[error("time {t} outside the valid response interval [{lo}, 1]")]
    OutOfValidRange { t: f64, lo: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("all {0} observations were excluded by the |Y| guard; NPE is undefined")]
    UndefinedNpe(usize),

    #[error("fold {fold} has no held-out response inside the valid interval")]
    FoldDegenerate { fold: usize },

    #[error("candidate lags {lags1}/{lags2} with rho ({rho1:e}, {rho2:e}): {source}")]
    Candidate {
        lags1: String,
        lags2: String,
        rho1: f64,
        rho2: f64,
        source: Box<Error>,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dense predictor grid differs between subjects ({subject})")]
    DenseGrid { subject: String },

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
