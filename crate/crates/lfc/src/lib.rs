//! File formats, run records and commands around `lfc-core`.

pub mod config;
pub mod dataset;
pub mod error;
pub mod kv;
pub mod pgm;
pub mod run;
pub mod tables;

pub use error::{CliError, CliResult};
