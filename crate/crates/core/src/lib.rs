//! Unsupervised SAR change detection with a convolution and attention mixer.
//!
//! The pipeline: a log-ratio difference image is preclassified by fuzzy
//! c-means into changed, unchanged and intermediate pixels; confident pixels
//! become pseudo-labelled training patches; the network is trained on them and
//! then classifies every pixel.

pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod io;
mod kernels;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preclassify;
pub mod speckle;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
