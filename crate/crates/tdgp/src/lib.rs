//! Files, configuration, synthetic data, checkpoints and experiment drivers
//! around `tdgp-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};
