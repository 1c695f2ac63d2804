//! Shared/specific feature decomposition and tri-consistency training for
//! longitudinal image/report generation, at desk scale.
//!
//! Modules, bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation over f64 tensors.
//! - [`nn`]: toy visual/text encoders, projection, decomposition heads and
//!   a causal report decoder.
//! - [`constraints`]: report cross-entropy, similarity, contrastive and
//!   structural losses, and their weighted total.
//! - [`synthgen`]: longitudinal samples with known shared, disappearing
//!   and emerging conditions.
//! - [`metrics`]: BLEU, ROUGE-L, label metrics, retrieval and PCA export.
//! - [`harness`]: training loop, checkpoints, ablation and sweep runners.

pub mod autodiff;
pub mod constraints;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod synthgen;

pub use error::{Error, Result};
