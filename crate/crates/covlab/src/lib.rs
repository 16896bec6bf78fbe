//! Experiment driver for diffusion-model covariance estimators on Gaussian
//! mixtures: configuration, checkpoints, named models, subcommands and
//! self-verification.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod models;
pub mod oracles;
pub mod verify;

pub use error::{CliError, CliResult};
