//! Experiment harness around the core library: plain-text configs, binary
//! checkpoints, line-delimited metrics, run manifests, and the subcommand
//! implementations behind the `ndft` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod metrics_log;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;
