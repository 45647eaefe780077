//! Command-line pipeline around the `lipgate` library: persistence formats,
//! run configuration and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod format;
pub mod records;

pub use config::RunConfig;
pub use error::{CliError, Result};
