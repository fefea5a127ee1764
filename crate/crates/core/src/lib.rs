//! Depth-recurrent transformer engine.
//!
//! A single shared-weight transformer block is applied recurrently in latent
//! space; the number of recurrence steps is an inference-time budget rather
//! than an architectural constant. The crate bundles the differentiable
//! substrate, the recurrent core with its task-specific perception and
//! readout interfaces, three compositional task generators with exact
//! oracles, a silent-supervision trainer with an intermediate-supervision
//! ablation, and an evaluator that sweeps (thinking steps x complexity)
//! grids into heatmap reports.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod params;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
