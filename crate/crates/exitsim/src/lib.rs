//! File formats, configuration and the command-line pipeline around
//! [`exitsim_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod pipeline;
pub mod tables;
pub mod traceio;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
