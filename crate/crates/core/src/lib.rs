//! Prompt-tuned grouping transformer for nucleus detection on synthetic
//! clustered scenes.
//!
//! Everything runs on plain `Vec<f64>` tensors with a small reverse-mode
//! tape; no BLAS, no threads. The crate is organized bottom-up: tensor and
//! tape primitives, then the backbone / detector / grouping-classifier
//! stages, then training, evaluation, and the synthetic data generator.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod gtc;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
