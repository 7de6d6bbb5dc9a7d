//! A laboratory for measuring transformer sensitivity to residual-stream
//! perturbations.
//!
//! The crate composes synthetic activations from sparse-autoencoder latents,
//! sweeps perturbations between a base and a target activation through a
//! small GPT-2-family model, and detects output blowups and activation
//! plateaus with four curve metrics (maximum slope, triangle-to-area ratio,
//! deviation from linearity, and threshold crossing), then compares the
//! resulting step distributions.
//!
//! Modules mirror the pipeline:
//!
//! * [`tensorfile`] / [`tokens`]: input file formats
//! * [`model`]: GPT-2-family forward pass with hook points and patching
//! * [`sae`]: sparse-autoencoder encode/decode and latent statistics
//! * [`composer`]: target-activation construction (Gaussian baselines and
//!   synthetic latent compositions)
//! * [`perturb`]: perturbation sweeps and readout curves
//! * [`metrics`]: step detectors and distribution comparison
//! * [`harness`]: experiment orchestration, reports, and caching

pub mod composer;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod sae;
pub mod tensorfile;
pub mod tokens;

pub use error::{Error, ErrorCategory, Result};
