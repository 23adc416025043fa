//! Degradation-free fully test-time adaptation on a small dense-network substrate.
//!
//! The crate provides:
//!
//! - [`netcore`]: a feedforward classifier (`[dense -> norm -> ReLU] x L -> dense`) with
//!   an explicit forward pass, reverse-mode gradients for the normalization affine
//!   parameters, source training and a finite-difference gradient oracle.
//! - [`normalize`]: the four normalization regimes (source statistics, batch statistics,
//!   test-time EMA, test-time batch renormalization).
//! - [`adapt`]: entropy / pseudo-label / Ent-W losses, dynamic online re-weighting and the
//!   per-mini-batch adaptation step.
//! - [`streams`]: generators for the IS/DS x CB/CI test-stream scenarios.
//! - [`harness`]: synthetic tasks, the single-pass online evaluation loop, metrics and
//!   report emission.

pub mod adapt;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod netcore;
pub mod normalize;
pub mod rng;
pub mod streams;

pub use error::{Error, Result};
pub use matrix::FeatureMatrix;
