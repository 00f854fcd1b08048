//! File formats, dataset directories, run configuration and the commands
//! behind the `tcsm` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use error::{CliError, Result};
