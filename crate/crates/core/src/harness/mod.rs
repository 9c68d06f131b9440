//! Experiment harness: program suites, training, scenarios, metrics and reports.

pub mod catalog;
pub mod config;
pub mod matrix;
pub mod metrics;
pub mod report;
pub mod scenario;
pub mod train;

use thiserror::Error;

use crate::beacon::BeaconError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] config::ConfigError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Beacon(#[from] BeaconError),
    #[error("report: {0}")]
    Report(String),
    #[error("io: {0}")]
    Io(String),
}
