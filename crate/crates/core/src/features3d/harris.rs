//! Harris corner response on surface normals.
//!
//! For every point the second-moment matrix `M = mean(n n^T)` of the unit
//! normals within `radius` is formed and scored with `det(M) - 0.04 tr(M)^2`.
//! Because normals are unit length `tr(M) = 1`, so the response lies in
//! `[-0.04, 1/27 - 0.04]`: planes and straight edges score `-0.04`, an ideal
//! trihedral corner scores `1/27 - 0.04`. Thresholds are therefore negative.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::pointcloud::{PointCloud, SpatialIndex};

use super::Keypoint3D;

pub const HARRIS_K: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarrisParams {
    pub radius: f64,
    pub threshold: f64,
    pub nms_radius: f64,
}

/// Per-point response; `None` when fewer than 3 points fall within `radius`.
pub fn harris_responses(cloud: &PointCloud, index: &SpatialIndex, radius: f64) -> Result<Vec<Option<f64>>> {
    let normals = cloud
        .normals
        .as_ref()
        .ok_or_else(|| Error::Precondition("Harris detection needs normals".into()))?;
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter("Harris radius must be positive".into()));
    }
    Ok(par::map_range(cloud.len(), |i| {
        let nb = index.within3(&cloud.points[i], radius);
        if nb.len() < 3 {
            return None;
        }
        let mut m = Matrix3::zeros();
        for n in &nb {
            let v = normals[n.index];
            m += v * v.transpose();
        }
        m /= nb.len() as f64;
        let tr = m.trace();
        Some(m.determinant() - HARRIS_K * tr * tr)
    }))
}

/// Points whose response exceeds `threshold` and is the strict local maximum
/// within `nms_radius` (equal responses resolve to the smaller index), sorted by
/// descending response.
pub fn detect_harris3d(cloud: &PointCloud, index: &SpatialIndex, params: &HarrisParams) -> Result<Vec<Keypoint3D>> {
    if cloud.is_empty() {
        return Ok(Vec::new());
    }
    let resp = harris_responses(cloud, index, params.radius)?;
    let is_peak = par::map_range(cloud.len(), |i| {
        let Some(r) = resp[i] else { return false };
        if r <= params.threshold {
            return false;
        }
        index.within3(&cloud.points[i], params.nms_radius).iter().all(|n| {
            n.index == i
                || match resp[n.index] {
                    None => true,
                    Some(o) => r > o || (r == o && i < n.index),
                }
        })
    });
    let mut kps: Vec<Keypoint3D> = (0..cloud.len())
        .filter(|&i| is_peak[i])
        .map(|i| Keypoint3D {
            position: cloud.points[i],
            source_index: i,
            saliency: resp[i].expect("peaks have a response"),
        })
        .collect();
    kps.sort_by(|a, b| b.saliency.total_cmp(&a.saliency).then(a.source_index.cmp(&b.source_index)));
    Ok(kps)
}
