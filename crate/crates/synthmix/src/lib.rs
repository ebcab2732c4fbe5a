//! Benchmark pipeline for measuring how GAN-generated synthetic images,
//! mixed into real training sets at a fixed total size, affect classifier
//! accuracy and out-of-distribution robustness.

pub mod cgan;
pub mod checkpoint;
pub mod classifier;
pub mod corruption;
pub mod data;
pub mod error;
pub mod fid;
pub mod mixer;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
