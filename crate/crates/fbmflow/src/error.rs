use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Hurst parameter H = {0}: this crate requires 1/2 < H < 1")]
    InvalidHurst(f64),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("increment covariance is not positive definite (grid/precision bug): {0}")]
    CovarianceNotPd(String),

    #[error("circulant embedding has negative eigenvalue {0:.3e}; Davies-Harte unavailable for this (N, H)")]
    CirculantNotPd(f64),

    #[error("frame degenerate at x = {x}: {reason}")]
    DegenerateFrame { x: String, reason: String },

    #[error("degenerate Malliavin matrix: {0}")]
    DegenerateMalliavin(String),

    #[error("path aborted at t = {t}: {reason}")]
    PathAbort { t: f64, reason: String },

    #[error("missing analytic gradient for test function `{0}`")]
    MissingGradient(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("rate unidentifiable: {0}")]
    RateUnidentifiable(String),

    #[error("hypothesis violation: {0}")]
    HypothesisViolation(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("configuration error:\n{0}")]
    Config(String),

    #[error("estimate invalid: {0}")]
    InvalidEstimate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
