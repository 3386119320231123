//! Lipschitz-normalized margin dynamics for neural-network training runs.
//!
//! The crate estimates a network's normalization factor `L_f` from its raw
//! weights, normalizes per-epoch margins by it, and turns the resulting
//! margin distributions into diagnostics: margin-error and inverse
//! quantile-margin curves, rank-correlation heatmaps, phase-transition
//! detection, early-stopping suggestions and a flag for the regime where
//! training margins improve uniformly while test error worsens.

pub mod analysis;
pub mod conv;
pub mod dynamics;
pub mod error;
pub mod margin;
pub mod network;
pub mod norm;
pub mod run;
pub mod snapshot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
