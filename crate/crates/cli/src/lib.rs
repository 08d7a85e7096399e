//! Command-line driver for the echoatt pipeline: teacher pretraining,
//! attention-similarity analysis, plan construction, distillation,
//! evaluation and benchmarking.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
