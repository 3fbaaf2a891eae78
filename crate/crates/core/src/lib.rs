//! Point-based multi-task LiDAR perception.
//!
//! A U-Net of neighborhood-attention blocks over raw points feeds a
//! per-point segmentation head and a query-based 3D detection head built on
//! point-space deformable attention. Everything the model needs is here:
//! voxel-query neighbor search, grid pooling, a reverse-mode
//! differentiation engine, losses, Hungarian matching, the training loop and
//! the evaluation metrics.

pub mod attention;
pub mod autodiff;
pub mod cloud;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod train;

pub use error::{Error, Result};
