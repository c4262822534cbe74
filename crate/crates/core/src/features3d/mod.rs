//! 3D keypoints and descriptors over the dense cloud.

mod harris;
mod rift;

pub use harris::{detect_harris3d, harris_responses, HarrisParams, HARRIS_K};
pub use rift::{extract_rift, RiftParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::pointcloud::{estimate_normals, intensity_and_gradient, median_nn_spacing, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint3D {
    pub position: Vec3,
    /// Index of the keypoint in the cloud it was detected on.
    pub source_index: usize,
    pub saliency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DescriptorStatus {
    Valid,
    /// Every histogram row is empty (no intensity variation nearby).
    LowEnergy,
    /// Too few neighbors to describe.
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor3D {
    pub values: Vec<f64>,
    pub status: DescriptorStatus,
}

impl Descriptor3D {
    pub fn is_usable(&self) -> bool {
        self.status != DescriptorStatus::Invalid
    }
}

/// Detector and descriptor settings. Radii are multiples of the cloud's
/// median nearest-neighbor spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Features3dConfig {
    pub normal_k: usize,
    pub gradient_k: usize,
    pub detector_radius_mult: f64,
    pub nms_radius_mult: f64,
    pub descriptor_radius_mult: f64,
    pub threshold: f64,
    pub distance_bins: usize,
    pub gradient_bins: usize,
    pub viewpoint: [f64; 3],
}

impl Default for Features3dConfig {
    fn default() -> Self {
        Features3dConfig {
            normal_k: 16,
            gradient_k: 16,
            detector_radius_mult: 6.0,
            nms_radius_mult: 6.0,
            descriptor_radius_mult: 12.0,
            threshold: -0.035,
            distance_bins: 4,
            gradient_bins: 8,
            viewpoint: [0.0; 3],
        }
    }
}

/// Keypoints with their descriptors, index-aligned.
#[derive(Debug, Clone)]
pub struct Features3d {
    pub keypoints: Vec<Keypoint3D>,
    pub descriptors: Vec<Descriptor3D>,
    pub spacing: f64,
}

impl Features3d {
    /// Pairs whose descriptor is usable downstream.
    pub fn usable(&self) -> impl Iterator<Item = (&Keypoint3D, &Descriptor3D)> {
        self.keypoints.iter().zip(&self.descriptors).filter(|(_, d)| d.is_usable())
    }
}

/// Normals (when missing), intensity gradients, Harris keypoints and RIFT
/// descriptors for a cloud with colors or intensities.
pub fn extract_features3d(cloud: &PointCloud, config: &Features3dConfig) -> Result<Features3d> {
    let index = cloud.index();
    let spacing = median_nn_spacing(cloud, &index)
        .filter(|s| *s > 0.0)
        .ok_or_else(|| Error::Precondition("cloud too small or degenerate for 3D features".into()))?;
    let cloud = if cloud.normals.is_some() {
        cloud.clone()
    } else {
        estimate_normals(cloud, config.normal_k, &Vec3::from(config.viewpoint))?.cloud
    };
    let field = intensity_and_gradient(&cloud, config.gradient_k)?;
    let harris = HarrisParams {
        radius: config.detector_radius_mult * spacing,
        threshold: config.threshold,
        nms_radius: config.nms_radius_mult * spacing,
    };
    let keypoints = detect_harris3d(&cloud, &index, &harris)?;
    let rift = RiftParams {
        radius: config.descriptor_radius_mult * spacing,
        distance_bins: config.distance_bins,
        gradient_bins: config.gradient_bins,
        min_neighbors: 5,
    };
    let descriptors = extract_rift(&cloud, &field, &index, &keypoints, &rift)?;
    log::info!(
        "3D features: {} keypoints ({} usable), spacing {spacing:.4}",
        keypoints.len(),
        descriptors.iter().filter(|d| d.is_usable()).count()
    );
    Ok(Features3d {
        keypoints,
        descriptors,
        spacing,
    })
}
