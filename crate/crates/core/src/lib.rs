//! Detector-prompted instance segmentation.
//!
//! A shifted-window transformer backbone feeds a set-prediction detector. The
//! detector's encoder memory stands in for the image embedding of a promptable
//! mask decoder, and its predicted boxes become the prompts.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod report;
pub mod segmenter;
pub mod trainer;

pub use error::{Error, Result};

/// Crate name and version, recorded in checkpoints and run manifests.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
