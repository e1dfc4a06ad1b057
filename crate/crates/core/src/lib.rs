//! Short-maturity implied-volatility approximations (BBF, SABR, rough SABR),
//! the rough-SABR g-function solver, Monte Carlo simulators for the
//! underlying models, and numerical checks that each approximation satisfies
//! the implied-volatility drift condition as time to expiry shrinks.

pub mod aaa;
pub mod error;
pub mod gfun;
pub mod mc;
pub mod numerics;
pub mod pricing;
pub mod rng;
pub mod smile;

pub use error::{Error, Result};
