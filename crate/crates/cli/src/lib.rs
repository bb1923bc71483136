//! Command-line pipeline for clustering and merging LoRA adapter fleets.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{ClusterMethod, ConfigError, OracleKind, RunConfig};
