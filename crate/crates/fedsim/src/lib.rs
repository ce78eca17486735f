//! Command-line front end for the `fedsim-core` simulator: config files,
//! CSV ingestion, threaded execution and result files.

pub mod commands;
pub mod config;
pub mod csv_data;
mod error;
pub mod exec;
pub mod output;

pub use error::{Error, Result};
