//! Fine-grained urban flow inference.
//!
//! A coarse `H×W` flow map is encoded at two scales (deformable
//! convolutions for neighborhoods, self-attention for the whole city),
//! decoded, fused, and upsampled by allocating every coarse value over its
//! `S×S` subregions. The allocation makes each block of the fine output sum
//! to the coarse value it came from, for any parameters.
//!
//! The crate also carries the data model, the contrastive pretraining
//! stages, supervised training, metrics and baselines.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod encoders;
mod error;
pub mod features;
pub mod fusion;
pub mod gradsuite;
pub mod grid;
pub mod gridfile;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sampler;
pub mod scaler;
pub mod split;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
