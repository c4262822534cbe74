//! Shared geometric types, the pinhole camera model, and pose error metrics.
//!
//! Poses map world to camera with an explicit camera center:
//! `p_cam = R (p_world - C)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// A proper rotation stored as its 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix, checking orthonormality and `det = +1` within `1e-9`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if !m.iter().all(|v| v.is_finite()) || ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "matrix is not a rotation (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix that is already known to be a rotation.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto the closest rotation (polar decomposition).
    pub fn from_matrix_nearest(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut d = Matrix3::identity();
            d[(2, 2)] = -1.0;
            r = u * d * vt;
        }
        Rotation(r)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// `(w, x, y, z)` components; need not be normalized.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::from_quaternion(&UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0))
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Rotation(*Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    /// Exponential map of a rotation vector.
    pub fn exp(omega: &Vec3) -> Self {
        Rotation(*Rotation3::new(*omega).matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(v))
    }
}

/// World-to-camera pose with the camera center expressed in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation,
    pub center: Vec3,
}

impl CameraPose {
    pub fn new(rotation: Rotation, center: Vec3) -> Self {
        CameraPose { rotation, center }
    }

    pub fn identity() -> Self {
        CameraPose::new(Rotation::identity(), Vec3::zeros())
    }

    /// Builds the pose from `p_cam = R p_world + t`.
    pub fn from_rt(rotation: Rotation, translation: &Vec3) -> Self {
        let center = -(rotation.matrix().transpose() * translation);
        CameraPose { rotation, center }
    }

    /// Translation `t = -R C`.
    pub fn translation(&self) -> Vec3 {
        -(self.rotation.matrix() * self.center)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.matrix() * (p - self.center)
    }

    /// Optical axis in world coordinates.
    pub fn viewing_direction(&self) -> Vec3 {
        self.rotation.matrix().row(2).transpose()
    }

    /// Camera looking from `eye` toward `target`, with image `y` pointing roughly along `-up`.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("look_at: eye equals target".into()))?;
        let x = z
            .cross(&-up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("look_at: up parallel to view".into()))?;
        let y = z.cross(&x);
        let m = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(CameraPose::new(Rotation::from_matrix_unchecked(m), *eye))
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    center: [f64; 3],
}

impl Serialize for CameraPose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseRepr {
            rotation: self.rotation.to_row_major(),
            center: [self.center.x, self.center.y, self.center.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let rotation = Rotation::from_row_major(&repr.rotation).map_err(serde::de::Error::custom)?;
        let center = Vec3::from(repr.center);
        if !center.iter().all(|c| c.is_finite()) {
            return Err(serde::de::Error::custom("non-finite camera center"));
        }
        Ok(CameraPose::new(rotation, center))
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr", into = "IntrinsicsRepr")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<IntrinsicsRepr> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: IntrinsicsRepr) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<CameraIntrinsics> for IntrinsicsRepr {
    fn from(k: CameraIntrinsics) -> Self {
        IntrinsicsRepr {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && width > 0
            && height > 0
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy} size={width}x{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Projects a world point; `None` when its camera-frame depth is not positive.
pub fn project(pose: &CameraPose, k: &CameraIntrinsics, p: &Vec3) -> Option<Pixel> {
    project_camera(k, &pose.to_camera(p))
}

pub(crate) fn project_camera(k: &CameraIntrinsics, pc: &Vec3) -> Option<Pixel> {
    if pc.z > 0.0 {
        Some(Pixel::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
    } else {
        None
    }
}

/// Unit ray through a pixel in camera coordinates.
pub fn bearing(k: &CameraIntrinsics, px: &Pixel) -> Vec3 {
    Vec3::new((px.u - k.cx) / k.fx, (px.v - k.cy) / k.fy, 1.0).normalize()
}

/// Geodesic angle between two rotations in degrees, `acos((tr(Rg Rp^T) - 1) / 2)`.
pub fn rotation_error_deg(rg: &Rotation, rp: &Rotation) -> f64 {
    let tr = (rg.matrix() * rp.matrix().transpose()).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle in degrees between the optical axes of two orientations. Ignores roll.
pub fn viewing_direction_error_deg(rg: &Rotation, rp: &Rotation) -> f64 {
    let a = rg.matrix().row(2).transpose();
    let b = rp.matrix().row(2).transpose();
    a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()
}

pub fn position_error(cg: &Vec3, cp: &Vec3) -> f64 {
    (cg - cp).norm()
}
