//! Experiment harness: warm-start system identification, training,
//! perturbed evaluation, ablations and report tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod report;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};
