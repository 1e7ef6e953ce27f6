//! File formats, experiment orchestration and reporting around `sscl-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsio;
pub mod observer;
pub mod report;
pub mod stream_io;

pub use error::{LabError, LabResult};
