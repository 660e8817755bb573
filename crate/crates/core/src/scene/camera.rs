use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::transform::{RigidTransform, RigidTransformRepr};

/// Pinhole camera with a camera-to-world pose.
///
/// Camera frame is right-handed with +z forward; a point at camera-space
/// `(x, y, z)` projects to pixel `(fx*x/z + cx, fy*y/z + cy)`.
#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// camera-to-world
    pub pose: RigidTransform,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::precondition("focal lengths must be positive"));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 || self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(Error::precondition("principal point outside image"));
        }
        self.pose.validate()
    }

    /// World-space camera center.
    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse().apply(p)
    }

    /// Projects a world point; returns (pixel, camera-space depth) or None
    /// behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((
            Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy),
            c.z,
        ))
    }

    /// Back-projects pixel `(u, v)` at camera-space depth `d` to world space.
    pub fn backproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        let cam = Vector3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d);
        self.pose.apply(&cam)
    }

    /// Unit ray direction through pixel `(u, v)` in world space.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let dir = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.pose.rotate(&dir).normalize()
    }

    /// Simple look-at constructor: camera at `eye` with +z toward `target`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = nalgebra::Matrix3::from_columns(&[x, y, z]);
        Camera {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            pose: RigidTransform::new(rotation, eye),
        }
    }
}

/// JSON-facing camera description used in dataset metadata.
#[derive(Serialize, Deserialize)]
pub struct CameraRepr {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: RigidTransformRepr,
}

impl From<&Camera> for CameraRepr {
    fn from(c: &Camera) -> Self {
        CameraRepr {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            pose: (&c.pose).into(),
        }
    }
}

impl From<&CameraRepr> for Camera {
    fn from(r: &CameraRepr) -> Self {
        Camera {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            pose: (&r.pose).into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam() -> Camera {
        Camera {
            fx: 120.0,
            fy: 130.0,
            cx: 31.5,
            cy: 23.5,
            width: 64,
            height: 48,
            pose: RigidTransform::from_axis_angle(&Vector3::y(), 0.3)
                .compose(&RigidTransform::from_translation(Vector3::new(0.1, -0.2, 0.4))),
        }
    }

    #[test]
    fn project_backproject_roundtrip() {
        let c = cam();
        for (u, v, d) in [(3.2, 4.5, 0.8), (60.0, 40.0, 2.3), (31.5, 23.5, 1.0)] {
            let world = c.backproject(u, v, d);
            let (px, depth) = c.project(&world).unwrap();
            assert_relative_eq!(px.x, u, epsilon = 1e-9);
            assert_relative_eq!(px.y, v, epsilon = 1e-9);
            assert_relative_eq!(depth, d, epsilon = 1e-12);
        }
    }

    #[test]
    fn look_at_faces_target() {
        let c = Camera::look_at(
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::zeros(),
            Vector3::z(),
            100.0,
            32,
            32,
        );
        let (px, d) = c.project(&Vector3::zeros()).unwrap();
        assert_relative_eq!(px.x, c.cx, epsilon = 1e-9);
        assert_relative_eq!(px.y, c.cy, epsilon = 1e-9);
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
    }
}
