//! Range-view LiDAR segmentation toolkit.
//!
//! Covers the deterministic parts of a range-image segmentation pipeline:
//! binary scan/label I/O, spherical projection with exact back-projection
//! bookkeeping, class-balance statistics and unified re-balance weights,
//! weighted paste/drop augmentation, loss kernels with analytic gradients
//! and Hungarian matching, the mask-classification head forward math with
//! semantic/panoptic inference merging, range-image KNN and temporal
//! post-processing, and mIoU / panoptic-quality evaluation.
//!
//! Everything is seedable and CPU-only; the [`cli`] module wires the pieces
//! into batch subcommands.

pub mod augment;
pub mod cli;
pub mod error;
pub mod loss;
pub mod head;
pub mod kitti_io;
pub mod metrics;
pub mod postprocess;
pub mod projection;
pub mod stats;

pub use error::{Error, Result};
