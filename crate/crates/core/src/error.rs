use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("probability {0} outside the open interval (0, 1)")]
    InvalidProbability(f64),

    #[error("gestational age {t} outside the window [{lo}, {hi}]")]
    OutOfWindow { t: f64, lo: f64, hi: f64 },

    #[error("measurement must be positive, got {0}")]
    NonPositiveMeasurement(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("times {prev} and {cur} are not one visit interval apart")]
    NotAdjacent { prev: f64, cur: f64 },

    #[error("too few observations: need at least {needed}, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("solver did not converge after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error("Box-Cox inverse undefined: 1 + L*S*z = {0} <= 0")]
    BoxCoxDomain(f64),

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("missing conditioning input: {0}")]
    MissingConditioning(&'static str),

    #[error("{failed} of {total} replications failed for {method}, above the 2% budget")]
    TooManyFailures {
        method: String,
        failed: usize,
        total: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
