//! Mask-conditioned histopathology image synthesis with style-guided
//! instance-adaptive normalization, plus the data, metric and downstream
//! segmentation tooling around it.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod extractor;
pub mod featurize;
pub mod losses;
pub mod mask;
pub mod maskgen;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod raster;
pub mod synthesize;
pub mod train;

pub use error::{Error, Result};
pub use candle_core::DType;
