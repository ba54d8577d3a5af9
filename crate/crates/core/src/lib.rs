//! Streaming test-time adaptation by anchored clustering.
//!
//! A source-trained network is adapted on an unlabeled test stream by
//! matching per-class Gaussian clusters of target features to per-class
//! source Gaussians (the anchors), plus a global Gaussian alignment term.
//! Target statistics are maintained incrementally, pseudo-labels are
//! filtered for temporal consistency and confidence, and every sample is
//! predicted before the model sees it for training.
//!
//! The crate is organized bottom-up:
//!
//! - [`stats`]: running Gaussian estimates with count clipping
//! - [`gauss`]: Gaussian KL, the adaptation objective and its feature gradient
//! - [`filter`]: posterior moving averages and pseudo-label filters
//! - [`nn`]: a small MLP with manual backpropagation and SGD
//! - [`engine`]: anchors, the sample queue and the streaming loop
//! - [`datagen`]: synthetic domains, corruptions and feature files
//! - [`report`], [`config`], [`bench`], [`cli`]: experiments and reporting

pub mod bench;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod filter;
pub mod gauss;
pub mod nn;
pub mod report;
pub mod stats;
pub mod tensorfile;

pub use config::{ExperimentConfig, SttrConfig};
pub use engine::{run_protocol, ClusterBank, Engine, PredictionLog, SourceAnchors};
pub use error::{Error, Result};
pub use stats::{Clip, RunningGaussian};
