//! File formats, experiment commands and orchestration around `read-core`.
//!
//! The `readlab` binary is a thin clap layer over [`commands`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod metrics;

pub use error::{LabError, Result};
