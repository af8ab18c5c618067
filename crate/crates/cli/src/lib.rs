//! File formats, configuration files and the `ffe` command-line tool.

pub mod benchmark;
pub mod commands;
pub mod config;
mod error;
pub mod format;
pub mod gradcheck;
pub mod synth;

pub use error::{CliError, FormatError, Location, Result};
