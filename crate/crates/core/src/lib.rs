//! Geometry toolkit for feature-based visual localization against Gaussian
//! scenes.
//!
//! The crate covers the whole chain on synthetic data: scene synthesis with
//! latent per-Gaussian features, a numerical laboratory for the bias of
//! alpha-blended feature optimization, keypoint-consensus landmark sampling,
//! geometry-weighted feature fusion, coarse/fine matching with local
//! geometric consistency verification, and RANSAC + PnP pose estimation.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` rejects NaN on purpose.

pub mod bias;
pub mod correspondence;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod kdtree;
pub mod pipeline;
pub mod pose;
pub mod rng;
pub mod sampling;
pub mod scene;
mod textio;

pub use error::{Error, Result};
pub use geometry::{Camera, Intrinsics, PixelPoint, Pose, PoseError};
pub use scene::{Gaussian, Scene, SceneConfig};
pub use textio::sha256_hex;
