//! Training, evaluation, ablation and gradient-check commands over
//! `dmlkit-core`, plus the run config they share.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use config::RunConfig;
pub use error::CliError;
