//! Zero-/few-shot industrial anomaly classification and segmentation.
//!
//! Patch features from several stages of a frozen vision encoder are mapped
//! into the text-embedding space by trainable linear heads and compared
//! against normal/abnormal prompt ensembles. When a few normal reference
//! images are available, per-stage memory banks add a nearest-neighbour
//! distance map on top of the zero-shot map.

pub mod backbone;
pub mod container;
pub mod data;
pub mod error;
pub mod fewshot;
pub mod metrics;
pub mod prompts;
pub mod resample;
pub mod zeroshot;

pub use error::{Error, Result};

/// Binary ground-truth mask, `H × W`, values 0 or 1.
pub type Mask = ndarray::Array2<u8>;
