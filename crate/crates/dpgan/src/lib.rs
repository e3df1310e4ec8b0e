//! File formats, experiment harness and CLI plumbing around `dpgan-core`.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod restart;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
