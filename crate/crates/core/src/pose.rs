//! Camera pose from 2D-3D correspondences: Grunert's P3P solver inside an
//! MLESAC loop, followed by Levenberg-Marquardt refinement on the inliers.

use std::time::Instant;

use nalgebra::{Matrix3, Matrix6, SVector, Vector6};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::descfile::{DescSet2D, DescSet3D};
use crate::error::{Error, Result};
use crate::geometry::{bearing, project, CameraIntrinsics, CameraPose, Pixel, Rotation, Vec3};
use crate::matcher::{match_descriptors, DescriptorMatcher, MatchOptions};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Unit ray in camera coordinates.
    pub bearing: Vec3,
    pub pixel: Pixel,
    pub world: Vec3,
    /// Index of the match candidate this came from.
    pub source: usize,
}

impl Correspondence {
    pub fn new(k: &CameraIntrinsics, pixel: Pixel, world: Vec3, source: usize) -> Self {
        Correspondence {
            bearing: bearing(k, &pixel),
            pixel,
            world,
            source,
        }
    }
}

/// Largest angle (radians) allowed between an input bearing and the ray to
/// its point under a returned P3P pose.
pub const P3P_BEARING_TOL: f64 = 1e-9;

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().fold(0.0, |p, &a| p * x + a)
}

/// Real roots of the polynomial with coefficients `c` (highest degree
/// first), ascending. Roots are isolated between consecutive roots of the
/// derivative and then bisected to full precision.
fn real_roots(c: &[f64]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = c.iter().position(|v| v.abs() > 1e-14 * scale).unwrap_or(c.len() - 1);
    let c: Vec<f64> = c[lead..].iter().map(|v| v / c[lead]).collect();
    let degree = c.len() - 1;
    match degree {
        0 => return Vec::new(),
        1 => return vec![-c[1]],
        _ => {}
    }
    let deriv: Vec<f64> = c[..degree].iter().enumerate().map(|(i, a)| a * (degree - i) as f64).collect();
    let bound = 1.0 + c[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut knots = vec![-bound];
    knots.extend(real_roots(&deriv).into_iter().filter(|x| x.abs() < bound));
    knots.push(bound);
    let mut roots = Vec::new();
    for w in knots.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (flo, fhi) = (horner(&c, lo), horner(&c, hi));
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if flo.signum() == fhi.signum() {
            // A double root touches zero at a derivative root.
            if fhi.abs() <= 1e-12 && hi < bound {
                roots.push(hi);
            }
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let fm = horner(&c, mid);
            if fm == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if fm.signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    // Rounding near a double root can split it into a close pair.
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-7 * (1.0 + b.abs()));
    roots
}

/// Newton iterations on the law-of-cosines system for depths `s`.
fn refine_depths(s: &mut Vec3, j: &[Vec3; 3], sq: [f64; 3]) {
    // Residuals from the chord vectors themselves; the law-of-cosines form
    // cancels badly when bearings are close together.
    let pairs = [(1, 2), (0, 2), (0, 1)];
    for _ in 0..8 {
        let mut f = Vec3::zeros();
        let mut jac = Matrix3::zeros();
        for (row, &(a, b)) in pairs.iter().enumerate() {
            let d = j[a] * s[a] - j[b] * s[b];
            f[row] = d.norm_squared() - sq[row];
            jac[(row, a)] = 2.0 * d.dot(&j[a]);
            jac[(row, b)] = -2.0 * d.dot(&j[b]);
        }
        match jac.lu().solve(&f) {
            Some(d) if d.iter().all(|v| v.is_finite()) => {
                *s -= d;
                if d.norm() <= 1e-15 * s.norm() {
                    break;
                }
            }
            _ => break,
        }
    }
}

/// Rigid transform `q = R p + t` carrying triangle `p` onto the congruent
/// triangle `q`, from the orthonormal frame each one spans. Unlike an SVD fit
/// this stays exact for thin triangles.
fn absolute_orientation(p: &[Vec3; 3], q: &[Vec3; 3]) -> (Rotation, Vec3) {
    let frame = |a: &[Vec3; 3]| {
        let e1 = (a[1] - a[0]).normalize();
        let e3 = (a[1] - a[0]).cross(&(a[2] - a[0])).normalize();
        Matrix3::from_columns(&[e1, e3.cross(&e1), e3])
    };
    let r = frame(q) * frame(p).transpose();
    let pc = (p[0] + p[1] + p[2]) / 3.0;
    let qc = (q[0] + q[1] + q[2]) / 3.0;
    (Rotation::from_matrix_unchecked(r), qc - r * pc)
}

fn triangle_area(p: &[Vec3; 3]) -> f64 {
    0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm()
}

/// All poses consistent with three bearing/point pairs (at most four).
/// Every returned pose maps each point onto its bearing within
/// [`P3P_BEARING_TOL`] radians.
pub fn p3p_solve(bearings: &[Vec3; 3], points: &[Vec3; 3]) -> Result<Vec<CameraPose>> {
    if triangle_area(points) <= 1e-12 {
        return Err(Error::Degenerate("P3P points are collinear".into()));
    }
    let j = bearings.map(|b| b.normalize());
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    let ca = j[1].dot(&j[2]);
    let cb = j[0].dot(&j[2]);
    let cg = j[0].dot(&j[1]);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let (ca2, cb2, cg2) = (ca * ca, cb * cb, cg * cg);
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca2,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca2 * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb2 + 2.0 * bmc * ca2 - 4.0 * apc * ca * cb * cg + 2.0 * bma * cg2),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg2 * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg2,
    ];
    let mut poses: Vec<CameraPose> = Vec::new();
    for v in real_roots(&coeffs) {
        if !(v > 0.0) {
            continue;
        }
        let denom_s = 1.0 + v * v - 2.0 * v * cb;
        if !(denom_s > 0.0) {
            continue;
        }
        let s1 = (b2 / denom_s).sqrt();
        let mut us = Vec::with_capacity(2);
        let denom_u = 2.0 * (cg - v * ca);
        if denom_u.abs() > 1e-10 {
            us.push(((amc - 1.0) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / denom_u);
        } else {
            // c^2 = s1^2 (1 + u^2 - 2 u cos(gamma))
            let disc = cg2 - 1.0 + c2 / (s1 * s1);
            if disc >= 0.0 {
                us.push(cg + disc.sqrt());
                us.push(cg - disc.sqrt());
            }
        }
        for u in us {
            if !(u > 0.0) {
                continue;
            }
            let mut s = Vec3::new(s1, u * s1, v * s1);
            refine_depths(&mut s, &j, [a2, b2, c2]);
            if !s.iter().all(|&d| d > 0.0 && d.is_finite()) {
                continue;
            }
            let q = [j[0] * s.x, j[1] * s.y, j[2] * s.z];
            let (r, t) = absolute_orientation(points, &q);
            let pose = CameraPose::from_rt(r, &t);
            let worst = (0..3)
                .map(|i| {
                    let pc = pose.to_camera(&points[i]);
                    pc.cross(&j[i]).norm().atan2(pc.dot(&j[i]))
                })
                .fold(0.0, f64::max);
            if worst > P3P_BEARING_TOL {
                continue;
            }
            let duplicate = poses.iter().any(|p| {
                (p.rotation.matrix() - r.matrix()).norm() < 1e-9 && (p.center - pose.center).norm() < 1e-9 * (1.0 + pose.center.norm())
            });
            if !duplicate {
                poses.push(pose);
            }
        }
    }
    Ok(poses)
}

/// Pixel distance between the projected point and the observation; infinite
/// when the point is not in front of the camera.
pub fn reprojection_residual(pose: &CameraPose, k: &CameraIntrinsics, c: &Correspondence) -> f64 {
    match project(pose, k, &c.world) {
        Some(px) => px.distance(&c.pixel),
        None => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlesacConfig {
    pub max_iterations: usize,
    pub inlier_sigma_px: f64,
    /// Side of the square window the outlier density is uniform over.
    /// `None` uses the image diagonal.
    pub search_window_px: Option<f64>,
    pub em_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
    pub refine: bool,
}

impl Default for MlesacConfig {
    fn default() -> Self {
        MlesacConfig {
            max_iterations: 2000,
            inlier_sigma_px: 2.0,
            search_window_px: None,
            em_iterations: 5,
            confidence: 0.999,
            min_inliers: 12,
            seed: 0,
            refine: true,
        }
    }
}

impl MlesacConfig {
    pub fn validate(&self) -> Result<()> {
        let window_ok = self.search_window_px.is_none_or(|w| w > 0.0);
        if self.max_iterations == 0
            || !(self.inlier_sigma_px > 0.0)
            || !window_ok
            || self.em_iterations == 0
            || !(self.confidence > 0.0 && self.confidence < 1.0)
            || self.min_inliers == 0
        {
            return Err(Error::InvalidParameter(format!("invalid MLESAC configuration {self:?}")));
        }
        Ok(())
    }
}

/// Inlier gate in units of sigma.
pub const INLIER_GATE: f64 = 2.5;
/// Hypotheses evaluated between termination checks.
const BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    InsufficientMatches,
    Degenerate,
    NoMatches,
    TooFewInliers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub matching_s: f64,
    pub pose_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    /// Best pose found, present even when rejected if one was evaluated.
    #[serde(flatten)]
    pub pose: Option<CameraPose>,
    /// Correspondence sources of the final inliers, ascending.
    pub inliers: Vec<usize>,
    pub nll: Option<f64>,
    pub iterations: usize,
    pub matches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

pub const LOCALIZED: &str = "localized";
pub const REJECTED: &str = "rejected";

impl LocalizationResult {
    pub fn is_localized(&self) -> bool {
        self.status == LOCALIZED
    }

    fn rejected(reason: RejectReason, matches: usize) -> Self {
        LocalizationResult {
            status: REJECTED.into(),
            reason: Some(reason),
            pose: None,
            inliers: Vec::new(),
            nll: None,
            iterations: 0,
            matches,
            timings: None,
        }
    }
}

struct Mixture {
    gauss_norm: f64,
    two_sigma2: f64,
    outlier_density: f64,
    em_iterations: usize,
}

impl Mixture {
    fn new(config: &MlesacConfig, k: &CameraIntrinsics) -> Self {
        let sigma = config.inlier_sigma_px;
        let w = config.search_window_px.unwrap_or_else(|| k.diagonal());
        Mixture {
            gauss_norm: 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma),
            two_sigma2: 2.0 * sigma * sigma,
            outlier_density: 1.0 / (w * w),
            em_iterations: config.em_iterations,
        }
    }

    /// Negative log-likelihood after fitting the inlier weight by EM.
    fn nll(&self, residuals: &[f64]) -> f64 {
        let g: Vec<f64> = residuals
            .iter()
            .map(|&r| if r.is_finite() { self.gauss_norm * (-r * r / self.two_sigma2).exp() } else { 0.0 })
            .collect();
        let u = self.outlier_density;
        let mut gamma = 0.5;
        for _ in 0..self.em_iterations {
            let sum: f64 = g.iter().map(|&gi| gamma * gi / (gamma * gi + (1.0 - gamma) * u)).sum();
            gamma = sum / g.len() as f64;
        }
        -g.iter().map(|&gi| (gamma * gi + (1.0 - gamma) * u).ln()).sum::<f64>()
    }
}

fn residuals(pose: &CameraPose, k: &CameraIntrinsics, corr: &[Correspondence]) -> Vec<f64> {
    corr.iter().map(|c| reprojection_residual(pose, k, c)).collect()
}

fn squared_error(pose: &CameraPose, k: &CameraIntrinsics, corr: &[Correspondence], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| reprojection_residual(pose, k, &corr[i]).powi(2)).sum()
}

/// Levenberg-Marquardt on the summed squared reprojection error of `idx`.
/// Returns a pose whose error is never larger than the starting one.
pub fn refine_pose(pose: &CameraPose, k: &CameraIntrinsics, corr: &[Correspondence], idx: &[usize]) -> CameraPose {
    let mut best = *pose;
    let mut best_err = squared_error(&best, k, corr, idx);
    if !best_err.is_finite() || idx.len() < 3 {
        return best;
    }
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let r = best.rotation.matrix();
        let t = best.translation();
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in idx {
            let c = &corr[i];
            let pc = r * c.world + t;
            if pc.z <= 0.0 {
                continue;
            }
            let (x, y, z) = (pc.x, pc.y, pc.z);
            let res = [k.fx * x / z + k.cx - c.pixel.u, k.fy * y / z + k.cy - c.pixel.v];
            let dp = [
                Vec3::new(k.fx / z, 0.0, -k.fx * x / (z * z)),
                Vec3::new(0.0, k.fy / z, -k.fy * y / (z * z)),
            ];
            for (row, d) in dp.iter().enumerate() {
                // d(pc)/d(omega) = -[pc]x for a left rotation increment.
                let dw = pc.cross(d);
                let jrow = SVector::<f64, 6>::new(dw.x, dw.y, dw.z, d.x, d.y, d.z);
                jtj += jrow * jrow.transpose();
                jtr += jrow * res[row];
            }
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vec3::new(step[0], step[1], step[2]);
            let dt = Vec3::new(step[3], step[4], step[5]);
            let nr = Rotation::exp(&omega).compose(&best.rotation);
            let nt = Rotation::exp(&omega).apply(&t) + dt;
            let cand = CameraPose::from_rt(nr, &nt);
            let err = squared_error(&cand, k, corr, idx);
            if err < best_err {
                let rel = (best_err - err) / best_err.max(f64::MIN_POSITIVE);
                best = cand;
                best_err = err;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    best
}

struct Hypothesis {
    nll: f64,
    iteration: usize,
    pose: CameraPose,
}

/// Robust pose from correspondences containing outliers.
pub fn mlesac_pose(corr: &[Correspondence], k: &CameraIntrinsics, config: &MlesacConfig) -> Result<LocalizationResult> {
    config.validate()?;
    let n = corr.len();
    if n < 4 {
        return Ok(LocalizationResult::rejected(RejectReason::InsufficientMatches, n));
    }
    let mixture = Mixture::new(config, k);
    let gate = INLIER_GATE * config.inlier_sigma_px;
    let mut best: Option<Hypothesis> = None;
    let mut best_inliers = 0usize;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let end = (iterations + BATCH).min(config.max_iterations);
        let batch = par::map_range(end - iterations, |b| {
            let it = iterations + b;
            let mut rng = par::rng_stream(config.seed, it as u64);
            let pick = index::sample(&mut rng, n, 3);
            let (i0, i1, i2) = (pick.index(0), pick.index(1), pick.index(2));
            let bearings = [corr[i0].bearing, corr[i1].bearing, corr[i2].bearing];
            let points = [corr[i0].world, corr[i1].world, corr[i2].world];
            let Ok(poses) = p3p_solve(&bearings, &points) else {
                return None;
            };
            poses
                .into_iter()
                .map(|pose| {
                    let res = residuals(&pose, k, corr);
                    let inliers = res.iter().filter(|&&r| r < gate).count();
                    (Hypothesis { nll: mixture.nll(&res), iteration: it, pose }, inliers)
                })
                .min_by(|a, b| a.0.nll.total_cmp(&b.0.nll))
        });
        for (h, inliers) in batch.into_iter().flatten() {
            let better = match &best {
                None => true,
                Some(b) => h.nll < b.nll || (h.nll == b.nll && h.iteration < b.iteration),
            };
            if better {
                best = Some(h);
                best_inliers = inliers;
            }
        }
        iterations = end;
        let w = best_inliers as f64 / n as f64;
        if w > 0.0 {
            let miss = 1.0 - w * w * w;
            if miss <= 0.0 || 1.0 - miss.powi(iterations as i32) >= config.confidence {
                break;
            }
        }
    }
    let Some(best) = best else {
        let mut r = LocalizationResult::rejected(RejectReason::Degenerate, n);
        r.iterations = iterations;
        return Ok(r);
    };
    let inlier_idx = |pose: &CameraPose| -> Vec<usize> {
        residuals(pose, k, corr)
            .iter()
            .enumerate()
            .filter(|(_, &r)| r < gate)
            .map(|(i, _)| i)
            .collect()
    };
    let mut pose = best.pose;
    let mut nll = best.nll;
    if config.refine {
        let idx = inlier_idx(&pose);
        let refined = refine_pose(&pose, k, corr, &idx);
        let refined_nll = mixture.nll(&residuals(&refined, k, corr));
        if squared_error(&refined, k, corr, &idx) <= squared_error(&pose, k, corr, &idx) && refined_nll <= nll {
            pose = refined;
            nll = refined_nll;
        }
    }
    let idx = inlier_idx(&pose);
    let mut inliers: Vec<usize> = idx.iter().map(|&i| corr[i].source).collect();
    inliers.sort_unstable();
    let localized = idx.len() >= config.min_inliers;
    Ok(LocalizationResult {
        status: if localized { LOCALIZED } else { REJECTED }.into(),
        reason: (!localized).then_some(RejectReason::TooFewInliers),
        pose: Some(pose),
        inliers,
        nll: Some(nll),
        iterations,
        matches: n,
        timings: None,
    })
}

/// Matches a query image's descriptors against the cloud's and solves the
/// pose.
pub fn localize(
    query: &DescSet2D,
    matcher: &DescriptorMatcher,
    cloud: &DescSet3D,
    k: &CameraIntrinsics,
    match_options: &MatchOptions,
    config: &MlesacConfig,
) -> Result<LocalizationResult> {
    let start = Instant::now();
    let candidates = if query.is_empty() || cloud.is_empty() {
        Vec::new()
    } else {
        match_descriptors(matcher, query, cloud, match_options, None)?
    };
    let matching_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut result = if candidates.is_empty() {
        LocalizationResult::rejected(RejectReason::NoMatches, 0)
    } else {
        let corr: Vec<Correspondence> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let kp = &query.keypoints[c.keypoint2d];
                Correspondence::new(k, Pixel::new(kp.u, kp.v), cloud.positions[c.keypoint3d], i)
            })
            .collect();
        mlesac_pose(&corr, k, config)?
    };
    result.timings = Some(Timings {
        matching_s,
        pose_s: start.elapsed().as_secs_f64(),
    });
    Ok(result)
}
