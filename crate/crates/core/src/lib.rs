//! Image harmonization with external background-style fusion and a
//! region-wise contrastive objective.

pub mod contrastive;
pub mod data;
pub mod error;
mod fused;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod resample;
pub mod selftest;
pub mod style_fusion;
pub mod training;

pub use error::{HarmonizeError, Result};
