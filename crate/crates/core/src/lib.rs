//! Weakly-supervised vessel segmentation on synthetic pathology patches.

pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod persist;
pub mod raster;
pub mod synthgen;
pub mod trainer;
pub mod weaklabel;

pub use error::{Error, Result};
