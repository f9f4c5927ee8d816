use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("quadrature did not converge: estimated error {achieved:e}, requested {requested:e}")]
    Quadrature { achieved: f64, requested: f64 },

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("step size underflow at time {achieved_time} of {target_time}")]
    StiffFailure {
        achieved_time: f64,
        target_time: f64,
    },

    #[error("size limit exceeded: {requested} sites, limit {limit}")]
    SizeLimit { requested: u128, limit: u128 },

    #[error("field does not match box: {0}")]
    IndexMismatch(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Domain(_) | Error::IndexMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
