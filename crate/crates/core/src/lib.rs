//! Dense-detection scoring laboratory: IoU-aware classification losses,
//! star-shaped box geometry with refinement, label assignment, ranking and
//! NMS, COCO-style AP, and a small trainable head on synthetic scenes.

pub mod assigner;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod ranking;
pub mod trainer;

pub use error::{Error, Result};
