//! Experiment driver for the `groupsparse` crate: configuration parsing,
//! the staged pipeline (gen-data, solve, certify, train, attack, report) and
//! report emission.

pub mod config;
pub mod error;
pub mod report;
pub mod stages;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use stages::{run_all, run_stage, Context, Stage};
