//! Surface normals and intensity gradients from k-nearest neighborhoods.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::par;

use super::{PointCloud, SpatialIndex};

/// Rec. 601 luma of an 8-bit color, scaled to `[0, 1]`.
pub fn luma(c: [u8; 3]) -> f64 {
    ((0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct NormalEstimate {
    /// Input cloud with `normals` filled in.
    pub cloud: PointCloud,
    /// Points whose neighborhood covariance has rank < 2. Their normal is a
    /// placeholder (unit vector toward the viewpoint) and must not be trusted.
    pub invalid: Vec<usize>,
}

/// Neighborhood of `i`: the point itself plus its `k` nearest neighbors.
fn neighborhood(cloud: &PointCloud, index: &SpatialIndex, i: usize, k: usize) -> Vec<usize> {
    let mut nn: Vec<usize> = index.knn3(&cloud.points[i], k + 1).into_iter().map(|n| n.index).collect();
    if !nn.contains(&i) {
        nn.pop();
        nn.insert(0, i);
    }
    nn
}

fn covariance(points: &[Vec3], idx: &[usize]) -> Matrix3<f64> {
    let mean = idx.iter().map(|&j| points[j]).sum::<Vec3>() / idx.len() as f64;
    let mut c = Matrix3::zeros();
    for &j in idx {
        let d = points[j] - mean;
        c += d * d.transpose();
    }
    c / idx.len() as f64
}

/// Smallest-eigenvalue eigenvector of the k-NN covariance, flipped to face
/// `viewpoint`.
pub fn estimate_normals(cloud: &PointCloud, k: usize, viewpoint: &Vec3) -> Result<NormalEstimate> {
    if k < 2 || k >= cloud.len() {
        return Err(Error::InvalidParameter(format!(
            "normal estimation needs 2 <= k < number of points (k = {k}, points = {})",
            cloud.len()
        )));
    }
    let index = cloud.index();
    let est = par::map_range(cloud.len(), |i| {
        let p = cloud.points[i];
        let toward = viewpoint - p;
        let cov = covariance(&cloud.points, &neighborhood(cloud, &index, i, k));
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let (mid, max) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
        if !(max > 0.0) || mid <= 1e-12 * max {
            let placeholder = toward.try_normalize(1e-300).unwrap_or_else(Vec3::z);
            return (placeholder, false);
        }
        let mut n: Vec3 = eig.eigenvectors.column(order[0]).normalize();
        if n.dot(&toward) < 0.0 {
            n = -n;
        }
        (n, true)
    });
    let invalid = est.iter().enumerate().filter(|(_, e)| !e.1).map(|(i, _)| i).collect();
    let mut out = cloud.clone();
    out.normals = Some(est.into_iter().map(|e| e.0).collect());
    Ok(NormalEstimate { cloud: out, invalid })
}

/// Per-point intensity and its gradient along the surface.
#[derive(Debug, Clone)]
pub struct IntensityField {
    pub intensity: Vec<f64>,
    /// Tangent-plane gradients; orthogonal to the point normal.
    pub gradient: Vec<Vec3>,
}

/// Orthonormal pair spanning the plane orthogonal to `n`.
pub(crate) fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = (helper - n * n.dot(&helper)).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Intensity per point (explicit intensities if present, otherwise luma of the
/// colors) and a least-squares linear fit of intensity over each k-NN
/// neighborhood, solved in the tangent plane of the point normal.
pub fn intensity_and_gradient(cloud: &PointCloud, k: usize) -> Result<IntensityField> {
    let intensity: Vec<f64> = match (&cloud.intensities, &cloud.colors) {
        (Some(i), _) => i.clone(),
        (None, Some(c)) => c.iter().map(|&c| luma(c)).collect(),
        (None, None) => return Err(Error::Precondition("intensity gradients need colors or intensities".into())),
    };
    let normals = cloud
        .normals
        .as_ref()
        .ok_or_else(|| Error::Precondition("intensity gradients need normals".into()))?;
    if k < 2 || k >= cloud.len() {
        return Err(Error::InvalidParameter(format!("gradient fit needs 2 <= k < number of points (k = {k})")));
    }
    let index = cloud.index();
    let gradient = par::map_range(cloud.len(), |i| {
        let p = cloud.points[i];
        let (t1, t2) = tangent_basis(&normals[i]);
        let nb = neighborhood(cloud, &index, i, k);
        if nb.iter().all(|&j| intensity[j] == intensity[i]) {
            return Vec3::zeros();
        }
        let reach = nb.iter().map(|&j| (cloud.points[j] - p).norm()).fold(0.0, f64::max);
        if !(reach > 0.0) {
            return Vec3::zeros();
        }
        let mut ata = Matrix3::zeros();
        let mut atb = Vec3::zeros();
        for j in nb {
            let d = (cloud.points[j] - p) / reach;
            let row = Vec3::new(d.dot(&t1), d.dot(&t2), 1.0);
            ata += row * row.transpose();
            atb += row * intensity[j];
        }
        let scale = ata.trace().max(f64::MIN_POSITIVE);
        match ata.cholesky() {
            Some(ch) if ata.determinant() > 1e-12 * scale * scale * scale => {
                let x = ch.solve(&atb);
                (t1 * x[0] + t2 * x[1]) / reach
            }
            _ => Vec3::zeros(),
        }
    });
    Ok(IntensityField { intensity, gradient })
}
