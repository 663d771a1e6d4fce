//! Variational nested dropout and Bayesian nested neural networks.
//!
//! The crate is organised around the ordering unit that learns which prefix of a
//! layer's output groups to keep:
//!
//! - [`ordering`]: the Bernoulli-chain prior over ordered masks, the Downhill
//!   variational posterior, their closed-form KL and the test-time width plans.
//! - [`layers`]: Bayesian dense and convolutional layers with multiplicative
//!   Gaussian weight noise, group-wise ordered masking and the per-layer KL.
//! - [`kl_approx`]: Monte Carlo ground truth and curve fit for the per-weight KL.
//! - [`model`] and [`trainer`]: networks, the SGVB objective, SGD training and
//!   checkpoints.
//! - [`metrics`]: calibration, OOD and segmentation metrics plus the width sweep.
//! - [`data`] and [`config`]: datasets, file formats and experiment configuration.
//!
//! Monte Carlo loops, grid evaluations and sweeps run on rayon when the
//! `parallel` feature is enabled (the default); see [`exec`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity,
    clippy::needless_range_loop
)]

pub(crate) mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod kl_approx;
pub mod layers;
mod math;
pub mod metrics;
pub mod model;
pub mod ordering;
pub mod trainer;

pub use error::{Result, VndError};
