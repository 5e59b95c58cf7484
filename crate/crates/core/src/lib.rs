//! Promptable segmentation of 3D Gaussian-splat scenes.
//!
//! Per-Gaussian feature vectors are distilled from multi-view 2D mask stacks
//! (and optional guidance feature maps), then queried with point, scribble,
//! mask or guidance-based prompts. Raw feature matches are cleaned up with
//! point-cloud filtering and growing in 3D.

pub mod bits;
pub mod distill;
pub mod error;
pub mod eval;
pub mod masks;
pub mod matching;
pub mod pipeline;
pub mod post;
pub mod prompt;
pub mod scene;
pub mod splat;
pub mod tensor;

pub use error::{Error, Result};
