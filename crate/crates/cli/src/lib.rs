//! Command-line orchestration of the perception performance pipeline:
//! scene mutation, surrogate detection, frame availability, trajectory
//! deviation and statistics, plus the queueing-network simulator.
//!
//! Every file written carries the SHA-256 of the configuration that
//! produced it and the master seed (a `#` comment line in CSVs, top-level
//! fields in JSON).

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

pub use error::{CliError, CliResult};
