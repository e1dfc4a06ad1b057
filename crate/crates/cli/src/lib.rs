//! Batch front-end: `gfun`, `smile`, `validate` and `residual` runs driven
//! by a flat config file, each writing one CSV and a text summary.

pub mod commands;
pub mod config;

pub use commands::Outcome;
pub use config::RunConfig;
