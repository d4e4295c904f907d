//! Command-line front end: TOML experiment configs and run directories.

pub mod config;
pub mod runner;

pub use config::{load_config, parse_config, ExperimentConfig, ExperimentKind};
pub use runner::{execute, Invocation};
