//! Pinhole camera with a rigid world-to-camera transform. The camera looks
//! down +z with +y pointing down the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::la::{self, Mat3, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation (rows are the camera axes in world space).
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let camera = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = la::normalize(la::sub(target, eye));
        let right = la::cross(forward, up);
        if la::norm(right) < 1e-9 {
            return Err(Error::InvalidParameter(
                "look_at: up vector is parallel to the view direction".into(),
            ));
        }
        let right = la::normalize(right);
        let down = la::cross(forward, right);
        let rotation = [right, down, forward];
        let translation = la::scale(la::mat_vec(&rotation, eye), -1.0);
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("camera has zero resolution".into()));
        }
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .into_iter()
            .chain(self.rotation.iter().flatten().copied())
            .chain(self.translation)
            .all(f64::is_finite);
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidParameter(
                "camera intrinsics/extrinsics must be finite with positive focal length".into(),
            ));
        }
        let rrt = la::mat_mul(&self.rotation, &la::transpose(&self.rotation));
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (rrt[i][j] - expected).abs() > 1e-6 {
                    return Err(Error::InvalidParameter("camera rotation is not orthonormal".into()));
                }
            }
        }
        if la::determinant(&self.rotation) < 0.0 {
            return Err(Error::InvalidParameter("camera rotation is a reflection".into()));
        }
        Ok(())
    }

    /// World point to camera coordinates.
    #[inline]
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        la::add(la::mat_vec(&self.rotation, p), self.translation)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        la::scale(la::mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    /// Same intrinsics and orientation, moved by `offset` in world space.
    pub fn translated(&self, offset: Vec3) -> Self {
        let mut out = self.clone();
        out.translation = la::sub(self.translation, la::mat_vec(&self.rotation, offset));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at([1.0, 2.0, -4.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 50.0, 32, 24).unwrap();
        let p = cam.to_camera([0.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!((p[2] - la::norm([1.0, 2.0, -4.0])).abs() < 1e-12);
        let c = cam.center();
        for (a, b) in c.iter().zip([1.0, 2.0, -4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn world_up_maps_to_image_up() {
        let cam = Camera::look_at([0.0, 0.0, -5.0], [0.0; 3], [0.0, 1.0, 0.0], 10.0, 8, 8).unwrap();
        // A point above the target lands above the principal point (smaller y).
        let p = cam.to_camera([0.0, 1.0, 0.0]);
        assert!(p[1] < 0.0);
        assert!(la::determinant(&cam.rotation) > 0.0);
    }

    #[test]
    fn rejects_bad_rotation() {
        let bad = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(10.0, 10.0, 0.0, 0.0, 4, 4, bad, [0.0; 3]).is_err());
        assert!(Camera::new(10.0, 10.0, 0.0, 0.0, 0, 4, la::IDENTITY3, [0.0; 3]).is_err());
    }

    #[test]
    fn translation_moves_center() {
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 8, 8).unwrap();
        let moved = cam.translated([1.0, 2.0, 3.0]);
        let c = moved.center();
        for (a, b) in c.iter().zip([1.0, 2.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
