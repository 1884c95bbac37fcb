//! Experiment harness for implicit feature refinement: configuration files,
//! CSV reports and the subcommands behind the `ifr` binary.

pub mod commands;
pub mod compare;
pub mod config;
pub mod diagnose;
pub mod error;
pub mod report;

pub use config::{ExperimentConfig, Workspace};
pub use error::{exit_code, CliError};
