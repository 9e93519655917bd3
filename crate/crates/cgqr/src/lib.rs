//! Contour-guided query refinement for boundary-aware ultrasound segmentation.
//!
//! The pipeline runs coarse segmentation on multi-resolution features,
//! extracts per-class contours from the coarse mask, embeds their shape
//! descriptors as attention queries, refines the fused feature tokens by
//! cross-attention, and predicts region and boundary maps from dual heads.

pub mod contour;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod heads;
pub mod model;
pub mod params;
pub mod pgm;
pub mod refine;
pub mod tape;
pub mod trainer;

pub mod cli;

pub use error::{CgqrError, Result};
