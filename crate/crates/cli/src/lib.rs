//! Experiment driver: config parsing and the `generate`, `train`,
//! `evaluate`, `forecast` and `export-latent` commands.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{data_seed, evaluate_cmd, export_latent, forecast_cmd, generate, mean_se, train, Context};
pub use config::{DataSection, ExperimentConfig, ModelSpec};
pub use error::{CliError, Result};
