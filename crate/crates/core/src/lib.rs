//! Liver lesion classification (cyst vs. metastasis) from segmented CT volumes.
//!
//! Lesions are described by three orthogonal intensity patches stacked as a
//! 3-channel image and classified by a compact Inception-style network with
//! optional residual connections and an auxiliary classifier. The crate covers
//! the whole pipeline: volume ingestion, patch extraction, augmentation,
//! training, evaluation and a synthetic phantom generator for testing.

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
