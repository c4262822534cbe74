//! Six-degree-of-freedom camera localization inside dense point clouds by
//! classifying concatenated 2D and 3D feature descriptors as matching or not,
//! then solving the pose robustly with P3P inside MLESAC.

// Parameter checks are written `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod descfile;
pub mod error;
pub mod eval;
pub mod features2d;
pub mod features3d;
pub mod geometry;
pub mod matcher;
pub mod mining;
pub mod par;
pub mod pointcloud;
pub mod pose;

pub use error::{Error, Result};
