//! Rigid transforms, unit quaternions (xyzw, scalar last) and cap-axis helpers.

use serde::{Deserialize, Serialize};

use super::RegistrationError;
use crate::linalg::{Mat3, Point3};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct RigidTransform<T: Real> {
    pub rotation: Mat3<T>,
    pub translation: Point3<T>,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Point3::zero() }
    }

    pub fn new(rotation: Mat3<T>, translation: Point3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Point3<T>) -> Point3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn apply_vector(&self, v: &Point3<T>) -> Point3<T> {
        self.rotation.mul_vec(v)
    }

    /// `self` after `first`: `x -> self(first(x))`.
    pub fn compose(&self, first: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&first.rotation),
            translation: self.rotation.mul_vec(&first.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -rt.mul_vec(&self.translation) }
    }

    /// Orthonormality and determinant error, whichever is larger.
    pub fn rotation_error(&self) -> T {
        rotation_error(&self.rotation)
    }
}

pub fn rotation_error<T: Real>(r: &Mat3<T>) -> T {
    let rtr = r.transpose().mul_mat(r);
    rtr.frobenius_distance(&Mat3::identity()).max((r.determinant() - T::one()).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion<T: Real> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub w: T,
}

impl<T: Real> Quaternion<T> {
    pub fn identity() -> Self {
        Self { x: T::zero(), y: T::zero(), z: T::zero(), w: T::one() }
    }

    pub fn to_xyzw(self) -> [T; 4] {
        [self.x, self.y, self.z, self.w]
    }

    pub fn norm(&self) -> T {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    /// Unit norm with `w >= 0`; for `w == 0` the first non-zero vector component is positive.
    pub fn canonical(self) -> Self {
        let n = self.norm();
        let mut q = Self { x: self.x / n, y: self.y / n, z: self.z / n, w: self.w / n };
        let lead = [q.x, q.y, q.z].into_iter().find(|v| *v != T::zero()).unwrap_or(T::one());
        if q.w < T::zero() || (q.w == T::zero() && lead < T::zero()) {
            q = Self { x: -q.x, y: -q.y, z: -q.z, w: -q.w };
        }
        q
    }

    pub fn to_rotation(&self) -> Mat3<T> {
        let n = self.norm();
        let (x, y, z, w) = (self.x / n, self.y / n, self.z / n, self.w / n);
        let two = T::lit(2.0);
        let one = T::one();
        Mat3::from_rows([
            [one - two * (y * y + z * z), two * (x * y - z * w), two * (x * z + y * w)],
            [two * (x * y + z * w), one - two * (x * x + z * z), two * (y * z - x * w)],
            [two * (x * z - y * w), two * (y * z + x * w), one - two * (x * x + y * y)],
        ])
    }
}

/// Hamilton quaternion of a rotation matrix (Shepperd's method), canonicalized.
pub fn rotation_to_quaternion<T: Real>(r: &Mat3<T>) -> Result<Quaternion<T>, RegistrationError> {
    if !r.is_finite() || rotation_error(r) > T::lit(1e-6) {
        return Err(RegistrationError::NotARotation);
    }
    let m = &r.m;
    let (one, two, quarter) = (T::one(), T::lit(2.0), T::lit(0.25));
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr >= m[0][0] && tr >= m[1][1] && tr >= m[2][2] {
        let s = (one + tr).sqrt() * two;
        Quaternion { w: quarter * s, x: (m[2][1] - m[1][2]) / s, y: (m[0][2] - m[2][0]) / s, z: (m[1][0] - m[0][1]) / s }
    } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
        let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * two;
        Quaternion { w: (m[2][1] - m[1][2]) / s, x: quarter * s, y: (m[0][1] + m[1][0]) / s, z: (m[0][2] + m[2][0]) / s }
    } else if m[1][1] >= m[2][2] {
        let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * two;
        Quaternion { w: (m[0][2] - m[2][0]) / s, x: (m[0][1] + m[1][0]) / s, y: quarter * s, z: (m[1][2] + m[2][1]) / s }
    } else {
        let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * two;
        Quaternion { w: (m[1][0] - m[0][1]) / s, x: (m[0][2] + m[2][0]) / s, y: (m[1][2] + m[2][1]) / s, z: quarter * s }
    };
    Ok(q.canonical())
}

/// Model up vector carried by the rotation; spin about the cap axis drops out.
pub fn cap_normal<T: Real>(r: &Mat3<T>, model_up: &Point3<T>) -> Point3<T> {
    let v = r.mul_vec(model_up);
    v.normalized().unwrap_or(v)
}

/// Angle in degrees between two non-zero vectors.
pub fn angle_between<T: Real>(a: &Point3<T>, b: &Point3<T>) -> Result<T, RegistrationError> {
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(RegistrationError::ZeroVector);
    }
    let c = (a.dot(b) / (na * nb)).max(-T::one()).min(T::one());
    Ok(c.acos().to_degrees())
}
