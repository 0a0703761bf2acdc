//! Zero-shot image classification refined by detector-guided cropping.
//!
//! A contrastive image-text model first scores the full image against every
//! class. The top-k classes are then sent to an open-vocabulary detector,
//! the best box is squared and enlarged by a margin ratio, and the crop is
//! re-scored against the top-k classes only. Test-time box augmentation
//! averages logits over random crops or over a chain of margin ratios.

pub mod backends;
pub mod boxgeom;
pub mod cli;
pub mod datasets;
pub mod detection;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod parallel;
pub mod pipeline;
pub mod prompts;
pub mod seed;

pub use error::{Error, Result};
