//! SPARC: a rehearsal-free continual learner built from task-specific
//! depthwise-separable working memories and a shared pointwise semantic
//! memory consolidated by exponential moving average.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, a recording compute graph and SGD.
//! - [`layers`]: split depthwise-separable units, task batch norm, residual
//!   blocks and classifier heads.
//! - [`model`]: working/semantic memories, consolidation, head
//!   re-normalization, parameter census and checkpoints.
//! - [`engine`]: datasets, task streams, the training loop, evaluation and
//!   SGD/JOINT/ER baselines.
//! - [`metrics`]: accuracy-matrix metrics and bias diagnostics.

pub mod engine;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Result, SparcError};
