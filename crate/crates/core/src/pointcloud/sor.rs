//! Statistical outlier removal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

use super::{PointCloud, SpatialIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SorParams {
    /// Neighbors per point, excluding the point itself.
    pub k: usize,
    pub stddev_mult: f64,
}

impl Default for SorParams {
    fn default() -> Self {
        SorParams { k: 16, stddev_mult: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SorResult {
    pub cloud: PointCloud,
    /// Indices into the input cloud, ascending.
    pub removed: Vec<usize>,
    pub mean_distance: f64,
    pub stddev: f64,
}

/// Mean distance from point `i` to its `k` nearest other points.
pub(crate) fn mean_knn_distance(cloud: &PointCloud, index: &SpatialIndex, i: usize, k: usize) -> f64 {
    let mut nn = index.knn3(&cloud.points[i], k + 1);
    match nn.iter().position(|n| n.index == i) {
        Some(pos) => {
            nn.remove(pos);
        }
        None => nn.truncate(k),
    }
    nn.iter().map(|n| n.distance).sum::<f64>() / k as f64
}

/// Removes points whose mean k-NN distance exceeds `mean + stddev_mult * stddev`
/// of that statistic over the whole cloud. The standard deviation uses the
/// `n - 1` denominator.
pub fn sor_filter(cloud: &PointCloud, params: &SorParams) -> Result<SorResult> {
    let n = cloud.len();
    if params.k == 0 || params.k >= n {
        return Err(Error::InvalidParameter(format!(
            "SOR needs 0 < k < number of points (k = {}, points = {n})",
            params.k
        )));
    }
    if !(params.stddev_mult > 0.0) {
        return Err(Error::InvalidParameter("SOR stddev_mult must be positive".into()));
    }
    let index = cloud.index();
    let d = par::map_range(n, |i| mean_knn_distance(cloud, &index, i, params.k));
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let stddev = var.sqrt();
    let threshold = mean + params.stddev_mult * stddev;
    let (keep, removed): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| d[i] <= threshold);
    Ok(SorResult {
        cloud: cloud.select(&keep),
        removed,
        mean_distance: mean,
        stddev,
    })
}
