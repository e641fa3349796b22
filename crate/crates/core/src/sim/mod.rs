//! Multi-party simulator: role actors, message codec, transports, dropout
//! injection and metrics.

pub mod actors;
pub mod codec;
pub mod config;
pub mod ledger;
pub mod plan;
pub mod runner;
pub mod transport;

pub use config::ExperimentConfig;
pub use runner::{run_experiment, MetricsReport};
