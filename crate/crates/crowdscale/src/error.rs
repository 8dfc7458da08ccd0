//! Crate-wide error type. Variants map onto the process exit codes used by the
//! CLI: configuration/validation problems exit 2, numerical failures exit 3,
//! comparison-tolerance failures exit 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bessel overflow: unscaled I_k({x}) exceeds f64 range; use the scaled form")]
    BesselOverflow { x: f64 },

    #[error("mean speed {value} outside [0, 1): the circular mean of unit vectors cannot reach 1")]
    SpeedOutOfRange { value: f64 },

    #[error("kernel table lookup out of range: {what}")]
    KernelRange { what: String },

    #[error("CFL violation: {constraint}")]
    CflViolation { constraint: String },

    #[error("heading update too large at pedestrian {index}: |F| dt = {value:.3e} >= pi/4")]
    HeadingStepTooLarge { index: usize, value: f64 },

    #[error(
        "fixed point stalled after {iters} iterations (last residual {residual:.3e}, last {} residuals: {history:?})",
        history.len()
    )]
    FixedPointStalled { iters: usize, residual: f64, history: Vec<f64> },

    #[error("caustic formed at t = {t:.4}: max density {max_rho:.3e} exceeded ceiling {ceiling:.3e}")]
    CausticFormed { t: f64, max_rho: f64, ceiling: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("config: {0}")]
    Config(String),

    #[error("comparison exceeded tolerance: {0}")]
    CompareTolerance(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI maps this error onto.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParams(_) => 2,
            Error::CompareTolerance(_) => 4,
            _ => 3,
        }
    }
}
