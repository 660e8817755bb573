use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proper rigid motion: `p -> R p + t` with `R` orthonormal, `det R = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform::new(Matrix3::identity(), t)
    }

    /// Rotation of `angle` radians about `axis`, centered at the origin.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        RigidTransform::new(q.to_rotation_matrix().into_inner(), Vector3::zeros())
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        if err > 1e-7 {
            return Err(Error::precondition(format!(
                "rotation not orthonormal (|R'R - I| = {err:.2e})"
            )));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::precondition("rotation has negative determinant"));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Unit quaternion of the rotation part (max-trace branch for stability).
    pub fn rotation_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
            self.rotation,
        ))
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        RigidTransform {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Rotation angle in radians (0..=pi).
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.rotation.trace();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Serialized as a 4x4 row-major matrix for JSON interfaces.
#[derive(Serialize, Deserialize)]
pub struct RigidTransformRepr(pub [[f64; 4]; 4]);

impl From<&RigidTransform> for RigidTransformRepr {
    fn from(t: &RigidTransform) -> Self {
        let m = t.to_matrix4();
        let mut rows = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                rows[r][c] = m[(r, c)];
            }
        }
        RigidTransformRepr(rows)
    }
}

impl From<&RigidTransformRepr> for RigidTransform {
    fn from(repr: &RigidTransformRepr) -> Self {
        let mut m = Matrix4::identity();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = repr.0[r][c];
            }
        }
        RigidTransform::from_matrix4(&m)
    }
}

/// Rotation matrix from a quaternion given as (w, x, y, z), normalizing first.
pub fn quat_to_rotation(q: &Quaternion<f64>) -> Matrix3<f64> {
    UnitQuaternion::new_normalize(*q).to_rotation_matrix().into_inner()
}
