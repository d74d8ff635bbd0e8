//! File formats, experiment drivers and the `mp3` command line on top of `mp3-core`.

pub mod bench;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use commands::{run, Command, Report};
pub use config::RunConfig;
pub use error::{CliError, Result};
