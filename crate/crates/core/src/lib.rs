//! Semi-supervised multimodal multiple-instance learning.
//!
//! A study ("bag") holds an unordered set of cine frame stacks and doppler
//! images. Each modality is encoded per instance, pooled with attention
//! (supervised dual attention for cine, plain attention for doppler), fused
//! by a learned gate and classified into three severity levels. Training
//! combines cross-entropy with a KL term that steers cine attention toward
//! external view-relevance scores, and a curriculum pseudo-labeling loop
//! folds unlabeled bags in by confidence rank.

pub mod autodiff;
pub mod curriculum;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pooling;
mod store;
pub mod train;

pub use error::{Error, Result};
