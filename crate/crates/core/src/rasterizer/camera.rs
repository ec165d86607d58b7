use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel `(u, v)` is sampled at `(u + 0.5, v + 0.5)`.
pub const PIXEL_CENTER: f64 = 0.5;
pub const NEAR: f64 = 0.01;
/// Screen-space dilation added to every projected covariance.
pub const DILATION: f64 = 0.3;

/// Pinhole camera with OpenCV axes (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.x, t.y, t.z],
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], //
            r[1][0], r[1][1], r[1][2], //
            r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vec())
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err < 1e-6) {
            return Err(Error::contract(format!("camera rotation is not orthonormal (error {err})")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::contract("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("camera image size must be at least 1x1"));
        }
        let finite = self.translation.iter().chain([&self.cx, &self.cy]).all(|v| v.is_finite());
        if !finite {
            return Err(Error::contract("camera has non-finite parameters"));
        }
        Ok(())
    }

    /// Unit world-space direction of the ray through pixel coordinates `(px, py)`.
    pub fn ray_dir(&self, px: f64, py: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        (self.rotation_matrix().transpose() * d_cam).normalize()
    }
}

/// Screen-space footprint of one 3D gaussian.
#[derive(Clone, Debug)]
pub struct Projection {
    pub p_cam: Vector3<f64>,
    pub mean2: Vector2<f64>,
    /// Dilated screen covariance.
    pub cov2: nalgebra::Matrix2<f64>,
    pub jac: Matrix2x3<f64>,
}

/// Perspective (EWA) projection; `None` when the mean is behind the near plane.
pub fn project(camera: &Camera, mean3: &Vector3<f64>, cov3: &Matrix3<f64>) -> Option<Projection> {
    let w = camera.rotation_matrix();
    let p = w * mean3 + camera.translation_vec();
    if !(p.z > NEAR) {
        return None;
    }
    let (x, y, z) = (p.x, p.y, p.z);
    let mean2 = Vector2::new(camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy);
    let jac = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * y / (z * z),
    );
    let m = jac * w;
    let mut cov2 = m * cov3 * m.transpose();
    cov2[(0, 0)] += DILATION;
    cov2[(1, 1)] += DILATION;
    Some(Projection {
        p_cam: p,
        mean2,
        cov2,
        jac,
    })
}

/// Backward of [`project`]. `d_cov2` may be any 2×2 matrix.
pub fn project_backward(
    camera: &Camera,
    proj: &Projection,
    cov3: &Matrix3<f64>,
    d_mean2: &Vector2<f64>,
    d_cov2: &nalgebra::Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let w = camera.rotation_matrix();
    let m = proj.jac * w;
    let d_cov3 = m.transpose() * d_cov2 * m;
    let d_m = d_cov2 * m * cov3.transpose() + d_cov2.transpose() * m * cov3;
    let d_j = d_m * w.transpose();
    let (x, y, z) = (proj.p_cam.x, proj.p_cam.y, proj.p_cam.z);
    let (fx, fy) = (camera.fx, camera.fy);
    let mut d_p = proj.jac.transpose() * d_mean2;
    let z2 = z * z;
    let z3 = z2 * z;
    d_p.z += d_j[(0, 0)] * (-fx / z2);
    d_p.x += d_j[(0, 2)] * (-fx / z2);
    d_p.z += d_j[(0, 2)] * (2.0 * fx * x / z3);
    d_p.z += d_j[(1, 1)] * (-fy / z2);
    d_p.y += d_j[(1, 2)] * (-fy / z2);
    d_p.z += d_j[(1, 2)] * (2.0 * fy * y / z3);
    (w.transpose() * d_p, d_cov3)
}
