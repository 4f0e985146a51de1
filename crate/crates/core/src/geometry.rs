//! Pinhole projection, translation recovery and rotation algebra.
//!
//! Quaternions are stored scalar-first `(w, x, y, z)`. Raw network outputs are
//! allowed to be non-unit; anything that needs a rotation normalizes first.
//! Angles are radians everywhere in this module.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating unit quaternions and rigid transforms.
pub const RIGID_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),
    #[error("focal lengths must be positive (fx = {fx}, fy = {fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Quaternion with scalar-first storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quaternion {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        q.to_array()
    }
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if !n.is_finite() {
            return Err(GeometryError::NonFinite("quaternion"));
        }
        if n == 0.0 {
            return Err(GeometryError::ZeroQuaternion);
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= RIGID_TOLERANCE
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, rhs: Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self, GeometryError> {
        let n = axis.norm();
        if n == 0.0 {
            return Err(GeometryError::ZeroQuaternion);
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Ok(Self::new(c, a.x * s, a.y * s, a.z * s))
    }

    /// Unit quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let q = q.scale(1.0 / q.norm());
        // canonical hemisphere keeps serialized poses stable
        if q.w < 0.0 {
            q.scale(-1.0)
        } else {
            q
        }
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_rotation_matrix(&self) -> Result<Matrix3<f64>, GeometryError> {
        quat_to_matrix(*self)
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

/// Rotation matrix of a unit quaternion, assumed normalized by the caller.
pub(crate) fn unit_quat_matrix(q: &Quaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Normalizes `q` and converts it to a rotation matrix. `R(q) == R(-q)`.
pub fn quat_to_matrix(q: Quaternion) -> Result<Matrix3<f64>, GeometryError> {
    let u = q.normalized()?;
    Ok(unit_quat_matrix(&u))
}

/// Geodesic angle between the rotations encoded by two quaternions, in `[0, pi]`.
pub fn rotation_angle_between(q1: Quaternion, q2: Quaternion) -> Result<f64, GeometryError> {
    let a = q1.normalized()?;
    let b = q2.normalized()?;
    // atan2 of the relative rotation stays accurate near zero, where acos of
    // the dot product loses half the digits.
    // Vector part of conj(a) * b, grouped so identical inputs cancel exactly.
    let v = [
        (a.w * b.x - b.w * a.x) - (a.y * b.z - a.z * b.y),
        (a.w * b.y - b.w * a.y) - (a.z * b.x - a.x * b.z),
        (a.w * b.z - b.w * a.z) - (a.x * b.y - a.y * b.x),
    ];
    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    Ok(2.0 * s.atan2(a.dot(&b).abs()))
}

/// Rigid object pose in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, normalizing the rotation.
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self {
            rotation: rotation.normalized()?,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        unit_quat_matrix(&self.rotation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `lhs * self`: applies a rigid transform on the left.
    pub fn left_compose(&self, lhs: &CameraExtrinsic) -> Pose {
        let m = lhs.matrix() * self.to_matrix();
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        Pose {
            rotation: Quaternion::from_rotation_matrix(&r),
            translation: m.fixed_view::<3, 1>(0, 3).into(),
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, px, py })
    }

    /// Projects a camera-frame point to pixels.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
        project_center(p, self)
    }

    /// Back-projects pixel `(u, v)` at depth `z` into the camera frame.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.px) * z / self.fx, (v - self.py) * z / self.fy, z)
    }
}

/// Projects a translation to its image center: `c = f * T_xy / T_z + p`.
pub fn project_center(
    t: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<(f64, f64), GeometryError> {
    if !(t.z > 0.0) {
        return Err(GeometryError::BehindCamera(t.z));
    }
    Ok((k.fx * t.x / t.z + k.px, k.fy * t.y / t.z + k.py))
}

/// Inverts [`project_center`] given a detected center, a regressed offset and depth.
pub fn recover_translation(
    c_box: (f64, f64),
    delta_c: (f64, f64),
    tz: f64,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if !(tz > 0.0) {
        return Err(GeometryError::InvalidDepth(tz));
    }
    Ok(Vector3::new(
        (c_box.0 + delta_c.0 - k.px) * tz / k.fx,
        (c_box.1 + delta_c.1 - k.py) * tz / k.fy,
        tz,
    ))
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 16]", into = "[f64; 16]")]
pub struct CameraExtrinsic(Matrix4<f64>);

impl TryFrom<[f64; 16]> for CameraExtrinsic {
    type Error = GeometryError;
    fn try_from(v: [f64; 16]) -> Result<Self, GeometryError> {
        CameraExtrinsic::new(Matrix4::from_row_slice(&v))
    }
}

impl From<CameraExtrinsic> for [f64; 16] {
    fn from(e: CameraExtrinsic) -> Self {
        e.to_row_major()
    }
}

impl CameraExtrinsic {
    pub fn new(m: Matrix4<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("extrinsic"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > RIGID_TOLERANCE {
            return Err(GeometryError::NotRigid(format!(
                "R*R^T deviates from I by {ortho:e}"
            )));
        }
        if r.determinant() < 0.0 {
            return Err(GeometryError::NotRigid("reflection".into()));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::NotRigid(format!("bottom row {bottom:?}")));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_rotation_translation(r: &Matrix3<f64>, t: &Vector3<f64>) -> Result<Self, GeometryError> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        Self::new(m)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into()
    }

    /// Closed-form rigid inverse `[R^T | -R^T t]`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self(m)
    }

    /// `self * rhs`.
    pub fn compose(&self, rhs: &CameraExtrinsic) -> Self {
        Self(self.0 * rhs.0)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }
}

/// Transform taking points in the previous camera frame to the current one:
/// `M_curr * M_prev^-1`.
pub fn relative_transform(m_prev: &CameraExtrinsic, m_curr: &CameraExtrinsic) -> CameraExtrinsic {
    m_curr.compose(&m_prev.inverse())
}
