//! Self-training domain adaptation for semantic segmentation with a
//! pseudo-label refinement network.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod numerics;
pub mod render;
pub mod runner;
pub mod segnet;
pub mod selftrain;
pub mod spectral;

pub use error::{Error, Result};
