//! Library behind the `fedleak` binary: experiment configs, run and attack
//! directories, sweeps, reports and plots.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod federate;
pub mod plot;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
