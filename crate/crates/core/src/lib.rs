//! Multi-ingredient food image recognition.
//!
//! Images are segmented by clustering the last-block features of a
//! single-ingredient CNN classifier, candidate regions are located inside
//! each segment (morphology and a 3×3 sliding grid), classified, and fused
//! into per-image ingredient sets. The classifier can be compressed by
//! removing blocks whose feature-map sums are structurally most similar.

pub mod decision;
pub mod error;
pub mod evaluation;
pub mod localization;
pub mod numerics;
pub mod pipeline;
pub mod pruning;
pub mod refnet;
pub mod segmentation;
pub mod synth;

pub use error::{Error, Result};
