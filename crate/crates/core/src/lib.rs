//! Multimodal recommendation with spectral band routing and behavior-aware
//! candidate calibration.

pub mod behavior;
pub mod calibrator;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod spectral;
pub mod synth;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
