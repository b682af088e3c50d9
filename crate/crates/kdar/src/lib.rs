//! kdar: a desk-scale laboratory for studying soft-label distillation and
//! adaptive per-sample reweighting on a synthetic long-tailed benchmark
//! whose answer priors shift between train and test.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`numerics`]: tempered softmax, divergences, BCE, finite-difference oracle
//! - [`losses`]: the distillation and reweighting objectives with analytic gradients
//! - [`model`]: a two-branch fused classifier with hand-derived backprop
//! - [`datagen`]: the synthetic biased benchmark generator and JSONL format
//! - [`train`]: the two-phase teacher/student training loops
//! - [`eval`]: consensus accuracy and bias-diagnostic breakdowns

pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod train;
pub mod util;

pub use error::{Error, Result};
