//! LiDAR-camera extrinsic registration from single-frame intensity
//! projections.
//!
//! The pipeline:
//!
//! 1. **Project** the 4D cloud through an initial extrinsic guess into a
//!    virtual intensity image and depth map ([`geometry::project`]).
//! 2. **Extract** coarse (1/8) and fine (1/2) descriptor grids for both
//!    modalities with separate parameter sets, add positional encodings and
//!    run self/cross attention ([`features`]).
//! 3. **Match** coarse cells with cosine similarity, Dual-Softmax and a
//!    per-cell repeatability score, keep mutual nearest neighbours above a
//!    threshold, then refine each match to sub-pixel precision with a
//!    windowed soft-argmax ([`matcher`]).
//! 4. **Lift** LiDAR-side pixels to 3D with nearest-neighbour filled depth and
//!    solve the extrinsics with EPnP inside RANSAC ([`pose`]).
//!
//! [`supervision`] builds ground-truth labels and evaluates the training
//! losses with analytic gradients; [`scene`] generates synthetic scenes with
//! known extrinsics; [`eval`] computes registration metrics and runs
//! benchmarks.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod io;
pub mod matcher;
pub mod pipeline;
pub mod pose;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod supervision;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PointCloud4D, RigidTransform};
pub use raster::{DepthMap, GrayImage, Grid, IntensityImage};

// The guide's code listings are compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/supervision.md")]
    mod supervision {}
    #[doc = include_str!("../../../book/src/pose.md")]
    mod pose {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
}
