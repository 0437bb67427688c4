//! File formats, the training driver and the command-line front end around
//! `tsgan-core`.

pub mod checkpoint;
pub mod cli;
pub mod config_file;
pub mod error;
pub mod fit;
pub mod loss_log;
pub mod manifest;
pub mod png_io;
pub mod report;

pub use error::{CliError, Result};
