//! Command-line front end: configuration files, run manifests and the
//! `simulate`, `solve-exact`, `train`, `compare` and `bias-sweep` commands.

pub mod config;
pub mod error;
pub mod manifest;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use runner::{Command, Input, RunOptions, RunReport, Runner};
