//! File formats, dataset directories and the command-line driver for
//! [`deepmil`].
//!
//! The core crate is pure computation; everything that touches the file
//! system lives here: binary PGM images, `labels.csv`/`boxes.csv` dataset
//! directories, `MILK` checkpoints, JSON run configurations and the
//! `deepmil` subcommands.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod fsutil;
pub mod pgm;

pub use args::Cli;
pub use commands::run;
pub use error::{CliError, Result};
