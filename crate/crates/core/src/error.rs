use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An input outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A quoted price outside the open no-arbitrage interval.
    #[error("price {price} outside no-arbitrage bounds ({lower}, {upper})")]
    ArbitrageBound { price: f64, lower: f64, upper: f64 },

    #[error("{what} did not converge after {iterations} iterations (last gap {last_gap:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        last_gap: f64,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Evaluation point outside a tabulated range; no extrapolation is done.
    #[error("{what} = {value} outside tabulated range [-{limit}, {limit}]; solve on a wider grid")]
    Range {
        what: &'static str,
        value: f64,
        limit: f64,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
