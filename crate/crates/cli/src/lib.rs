//! Command implementations behind the `embgeo` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod tables;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
