//! Core of the semi-supervised continual learning lab.
//!
//! Everything here is allocation-only: dense matrices and their gradients,
//! the ETF anchors, the synthetic task stream, the small learner, exemplar
//! management, the USP loss terms, the training loop and evaluation. File
//! formats and the command line live in `sscl-lab`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod etf;
pub mod eval;
pub mod exemplar;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod rng;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
