//! File formats, checkpoints and the `hran` command-line tool built on
//! [`hran_core`].

pub mod chat;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod io;

pub use checkpoint::Checkpoint;
pub use config::{DecodeOptions, RunConfig, RunPaths};
pub use error::{CliError, CliResult};
