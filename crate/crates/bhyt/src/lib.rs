//! Bounded hyperbolic tanh (BHyT) normalization and its competitors inside a
//! minimal causal decoder block, plus the analytic variance-propagation engine
//! and benchmark harness used to verify the stability and efficiency claims.
//!
//! Module map:
//!
//! * [`numerics`] — deterministic dense kernels and seeded RNG streams
//! * [`norm`] — the normalization zoo (BHyT*, BHyT, RMSNorm, RMSNorm-Approx,
//!   LNS, DyT) with analytic backward passes
//! * [`estimator`] — closed-form variance estimates from weight snapshots
//! * [`block`] — a single decoder block with swappable normalization placement
//! * [`model`] — the stacked toy decoder LM
//! * [`depth`] — depth-wise variance propagation and Monte-Carlo scans
//! * [`train`] — tiny-scale training harness with layer-statistics logging
//! * [`bench`] — forward/generation microbenchmarks (f32 fast path)
//! * [`stats`] — scalar metrics (RMSE, R², Pearson, Spearman)

pub mod activation;
pub mod bench;
pub mod block;
pub mod depth;
pub mod error;
pub mod estimator;
pub mod model;
pub mod norm;
pub mod numerics;
pub mod sampling;
pub mod stats;
pub mod train;

pub use error::{BhytError, Result};
pub use numerics::{RngStream, Tensor};
