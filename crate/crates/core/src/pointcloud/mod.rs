//! Dense point clouds: storage, PLY I/O, spatial indexing and preprocessing.

mod kdtree;
mod normals;
mod ply;
mod sor;

pub use kdtree::{KdTree, Neighbor, SpatialIndex};
pub use normals::{estimate_normals, intensity_and_gradient, luma, IntensityField, NormalEstimate};
pub use ply::{read_ply, read_ply_from, write_ply, write_ply_to, PlyFormat};
pub use sor::{sor_filter, SorParams, SorResult};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Positions with optional per-point attributes. Every present attribute array
/// has one entry per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub intensities: Option<Vec<f64>>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        PointCloud {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_colors(mut self, colors: Vec<[u8; 3]>) -> Result<Self> {
        check_len("colors", colors.len(), self.len())?;
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        check_len("normals", normals.len(), self.len())?;
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_intensities(mut self, intensities: Vec<f64>) -> Result<Self> {
        check_len("intensities", intensities.len(), self.len())?;
        self.intensities = Some(intensities);
        Ok(self)
    }

    /// Checks attribute lengths, finiteness and unit normals.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if let Some(c) = &self.colors {
            check_len("colors", c.len(), n)?;
        }
        if let Some(i) = &self.intensities {
            check_len("intensities", i.len(), n)?;
        }
        if let Some(nr) = &self.normals {
            check_len("normals", nr.len(), n)?;
            if let Some(i) = nr.iter().position(|v| (v.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidParameter(format!("normal {i} is not unit length")));
            }
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidParameter(format!("point {i} is not finite")));
        }
        Ok(())
    }

    /// Keeps the points whose index is in `keep` (ascending), with their attributes.
    pub fn select(&self, keep: &[usize]) -> PointCloud {
        fn pick<T: Clone>(v: &[T], keep: &[usize]) -> Vec<T> {
            keep.iter().map(|&i| v[i].clone()).collect()
        }
        PointCloud {
            points: pick(&self.points, keep),
            colors: self.colors.as_deref().map(|c| pick(c, keep)),
            intensities: self.intensities.as_deref().map(|c| pick(c, keep)),
            normals: self.normals.as_deref().map(|c| pick(c, keep)),
        }
    }

    /// Applies `f` to positions and `g` to normals.
    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3, g: impl Fn(&Vec3) -> Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(&f).collect(),
            colors: self.colors.clone(),
            intensities: self.intensities.clone(),
            normals: self.normals.as_ref().map(|n| n.iter().map(&g).collect()),
        }
    }

    pub fn index(&self) -> SpatialIndex {
        SpatialIndex::from_vec3(&self.points)
    }
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::InvalidParameter(format!(
            "{what} has {got} entries but the cloud has {expected} points"
        )));
    }
    Ok(())
}

/// Median distance from each point to its nearest other point.
pub fn median_nn_spacing(cloud: &PointCloud, index: &SpatialIndex) -> Option<f64> {
    if cloud.len() < 2 {
        return None;
    }
    let mut d = crate::par::map_range(cloud.len(), |i| {
        index
            .knn3(&cloud.points[i], 2)
            .into_iter()
            .find(|n| n.index != i)
            .map_or(0.0, |n| n.distance)
    });
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}
