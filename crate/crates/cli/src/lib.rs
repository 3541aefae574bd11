//! Command-line harness: on-disk formats, experiment configuration and the
//! subcommand implementations behind the `pnpttt` binary.

pub mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pgm;
pub mod results;

pub use error::{CliError, Result};
