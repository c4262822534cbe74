//! RIFT descriptors: a ring-distance by gradient-orientation histogram around
//! each keypoint.
//!
//! Orientation is the angle between a neighbor's intensity gradient and the
//! outward radial direction, projected into that neighbor's tangent plane, so
//! the histogram is unchanged by rigid rotations of the cloud.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::par;
use crate::pointcloud::{IntensityField, PointCloud, SpatialIndex};

use super::{Descriptor3D, DescriptorStatus, Keypoint3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiftParams {
    pub radius: f64,
    pub distance_bins: usize,
    pub gradient_bins: usize,
    /// Keypoints with fewer neighbors inside `radius` are flagged invalid.
    pub min_neighbors: usize,
}

impl RiftParams {
    pub fn new(radius: f64) -> Self {
        RiftParams {
            radius,
            distance_bins: 4,
            gradient_bins: 8,
            min_neighbors: 5,
        }
    }

    pub fn dim(&self) -> usize {
        self.distance_bins * self.gradient_bins
    }
}

/// Splits coordinate `f` (bin-center units) between its two nearest bins,
/// clamping at both ends.
fn soft_bins(f: f64, bins: usize) -> [(usize, f64); 2] {
    let lo = f.floor();
    let w = f - lo;
    let clamp = |b: f64| b.clamp(0.0, (bins - 1) as f64) as usize;
    [(clamp(lo), 1.0 - w), (clamp(lo + 1.0), w)]
}

fn describe(
    cloud: &PointCloud,
    normals: &[Vec3],
    field: &IntensityField,
    index: &SpatialIndex,
    kp: &Keypoint3D,
    params: &RiftParams,
) -> Descriptor3D {
    let (nd, ng) = (params.distance_bins, params.gradient_bins);
    let mut hist = vec![0.0f64; nd * ng];
    let p = kp.position;
    let neighbors = index.within3(&p, params.radius);
    let count = neighbors.iter().filter(|n| n.distance > 0.0).count();
    if count < params.min_neighbors {
        return Descriptor3D {
            values: hist,
            status: DescriptorStatus::Invalid,
        };
    }
    for n in neighbors.iter().filter(|n| n.distance > 0.0) {
        let q = n.index;
        let g = field.gradient[q];
        let mag = g.norm();
        if mag == 0.0 {
            continue;
        }
        let r = cloud.points[q] - p;
        let nq = normals[q];
        let radial = r - nq * r.dot(&nq);
        if radial.norm() <= 1e-12 * n.distance {
            continue;
        }
        let angle = g.cross(&radial).norm().atan2(g.dot(&radial));
        let fd = n.distance / params.radius * nd as f64 - 0.5;
        let fo = angle / std::f64::consts::PI * ng as f64 - 0.5;
        for (di, dw) in soft_bins(fd, nd) {
            for (oi, ow) in soft_bins(fo, ng) {
                hist[di * ng + oi] += mag * dw * ow;
            }
        }
    }
    let mut energy = false;
    for row in hist.chunks_mut(ng) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            energy = true;
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Descriptor3D {
        values: hist,
        status: if energy {
            DescriptorStatus::Valid
        } else {
            DescriptorStatus::LowEnergy
        },
    }
}

/// One descriptor per keypoint, index-aligned with `keypoints`.
pub fn extract_rift(
    cloud: &PointCloud,
    field: &IntensityField,
    index: &SpatialIndex,
    keypoints: &[Keypoint3D],
    params: &RiftParams,
) -> Result<Vec<Descriptor3D>> {
    if !(params.radius > 0.0) || params.distance_bins == 0 || params.gradient_bins == 0 {
        return Err(Error::InvalidParameter("RIFT needs a positive radius and bin counts".into()));
    }
    let normals = cloud
        .normals
        .as_ref()
        .ok_or_else(|| Error::Precondition("RIFT needs normals".into()))?;
    if field.gradient.len() != cloud.len() {
        return Err(Error::Precondition("intensity field does not match the cloud".into()));
    }
    if let Some(kp) = keypoints.iter().find(|k| k.source_index >= cloud.len()) {
        return Err(Error::InvalidParameter(format!("keypoint source index {} out of range", kp.source_index)));
    }
    Ok(par::map_slice(keypoints, |kp| describe(cloud, normals, field, index, kp, params)))
}
