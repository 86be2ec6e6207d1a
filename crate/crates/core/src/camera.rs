//! Pinhole cameras.
//!
//! A pose maps world points into the camera frame as `p_cam = R p_world + t`.
//! The camera looks down its +z axis; `u` grows with camera x and `v` with
//! camera y. Depth `d` is the camera-frame z coordinate.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};

/// Points closer to the image plane than this are rejected.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, intrinsics: Intrinsics) -> Result<Self> {
        let pose = CameraPose {
            rotation,
            translation,
            intrinsics,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Camera centered at `eye` looking at `target`; `up` picks the roll.
    /// Image v grows away from `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, intrinsics: Intrinsics) -> Result<Self> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| LampError::config("look_at: eye equals target"))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| LampError::config("look_at: up parallel to viewing direction"))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation, intrinsics)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 || self.rotation.determinant() < 0.0 {
            return Err(LampError::config(format!("rotation is not orthonormal (error {err:e})")));
        }
        if !(self.intrinsics.fx > 0.0 && self.intrinsics.fy > 0.0) {
            return Err(LampError::config("focal lengths must be positive"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// World point to `(u, v, d)`. `None` when the point is not in front
    /// of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 3]> {
        let c = self.world_to_camera(p);
        if c.z <= MIN_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        Some([k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z])
    }

    pub fn unproject(&self, uvd: [f64; 3]) -> Vector3<f64> {
        let k = &self.intrinsics;
        let [u, v, d] = uvd;
        let c = Vector3::new((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d);
        self.camera_to_world(&c)
    }

    /// World-space ray through pixel position `(u, v)`, scaled so that the
    /// ray parameter equals camera depth.
    pub fn ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.center(), self.rotation.transpose() * dir_cam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradcore::Rng;

    fn k() -> Intrinsics {
        Intrinsics {
            fx: 40.0,
            fy: 42.0,
            cx: 16.0,
            cy: 15.5,
        }
    }

    #[test]
    fn axis_point_after_translation() {
        // Identity rotation, camera moved 0.2 toward a point at depth 1.
        let cam = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -0.2), k()).unwrap();
        let [u, v, d] = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((d - 0.8).abs() < 1e-15);
        assert_eq!((u, v), (16.0, 15.5));
    }

    #[test]
    fn round_trip_unproject_project() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let eye = Vector3::new(rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0), rng.uniform_range(1.0, 3.0));
            let cam = CameraPose::look_at(eye, Vector3::new(0.1, -0.2, 0.0), Vector3::new(0.0, 1.0, 0.0), k()).unwrap();
            let p = Vector3::new(rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.2, 0.2));
            let uvd = cam.project(&p).unwrap();
            let back = cam.unproject(uvd);
            assert!((back - p).abs().max() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = CameraPose::new(Matrix3::identity(), Vector3::zeros(), k()).unwrap();
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let r = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(r, Vector3::zeros(), k()).is_err());
    }

    #[test]
    fn ray_parameter_is_depth() {
        let cam = CameraPose::look_at(Vector3::new(0.3, 0.2, 2.0), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), k()).unwrap();
        let (o, dir) = cam.ray(5.0, 20.0);
        let p = o + dir * 1.7;
        let [u, v, d] = cam.project(&p).unwrap();
        assert!((u - 5.0).abs() < 1e-9 && (v - 20.0).abs() < 1e-9 && (d - 1.7).abs() < 1e-12);
    }
}
