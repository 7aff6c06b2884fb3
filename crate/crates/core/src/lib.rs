//! Few-shot attribute inference over a learned text graph.
//!
//! Texts arrive as fixed-size embeddings. Each text becomes a graph node whose
//! representation is its embedding plus a label channel; edges are learned
//! from pairwise feature differences and node representations are refined by
//! graph convolution. Training combines a cross-domain and a target-domain
//! distillation stage.

// Parameter checks use `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distill;
mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pipeline;

pub use error::{Error, Result};
