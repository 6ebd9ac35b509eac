// SPDX-License-Identifier: MIT OR Apache-2.0

//! A desk-scale laboratory for artificial uncertainty.
//!
//! A tiny causal transformer is trained to saturation on synthetic
//! multiple-choice facts. A modified copy of it is then made less certain,
//! either by dropout at inference time or by unlearning, and linear probes
//! trained on the modified model's hidden states are applied to the original
//! model. Calibration metrics measure whether those probes recognize real
//! uncertainty on questions the model never saw.
//!
//! Module map:
//!
//! - [`autodiff`]: tensors, a define-by-run tape and optimizers.
//! - [`nanolm`]: the transformer, its training loop and checkpoints.
//! - [`taskgen`]: the synthetic corpus and its splits.
//! - [`forge`]: dropout variants, gradient ascent, NPO and RMU.
//! - [`probe`]: hidden-state records and logistic probes.
//! - [`metrics`]: Brier, ECE, AUROC, reliability bins, agreement filter.
//! - [`select`]: variance-based unsupervised hyperparameter selection.
//! - [`harness`]: the file-based experiment pipeline.

pub mod autodiff;
pub mod error;
pub mod forge;
pub mod harness;
pub mod metrics;
pub mod nanolm;
pub mod probe;
pub mod rng;
pub mod select;
pub mod taskgen;

pub use error::{Error, Result};
