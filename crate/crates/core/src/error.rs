use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("spectrum convention violation: {0}")]
    Convention(String),

    #[error("quadrature did not converge: achieved relative error {achieved:.3e}, requested {requested:.3e}")]
    QuadratureNotConverged { achieved: f64, requested: f64 },

    #[error(
        "time step {dt:.3e} s too coarse for spectral support up to {omega_max:.3e} rad/s; need dt < {required:.3e} s"
    )]
    TimeStepTooCoarse { dt: f64, omega_max: f64, required: f64 },

    #[error("ensemble duration {available:.6e} s shorter than required {required:.6e} s")]
    DurationShortfall { available: f64, required: f64 },

    #[error("decay fit failed: {0}")]
    DecayFit(String),

    #[error("identifiability floor violated: {points} data points for {terms} terms (need at least {required})")]
    Identifiability {
        points: usize,
        terms: usize,
        required: usize,
    },

    #[error("bootstrap band unreliable: {failed} of {total} refits failed")]
    BandUnreliable { failed: usize, total: usize },

    #[error("rank-deficient scaling fit: {0}")]
    RankDeficient(String),

    #[error("frequency {omega:.6e} rad/s lies outside the sampled band [{lo:.6e}, {hi:.6e}]")]
    Extrapolation { omega: f64, lo: f64, hi: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}:{line}: {message}")]
    InputRow { path: String, line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
