//! Reproducible experiment runs over the replaylens toolkit: one JSON
//! config in, checkpoints and reports plus a hashed manifest out.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use error::{CliError, Result};
