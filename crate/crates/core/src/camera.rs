//! Pinhole cameras, rigid poses and plane-induced homographies.
//!
//! Conventions: right-handed camera frame looking down `+z`, image `x` to the
//! right and `y` down, pixel centres on integer coordinates. Poses map world
//! points into the camera frame, `X_cam = W X + t`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum |w| of a warped homogeneous pixel.
pub const HOMOGENEOUS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K^-1 p~`: the camera-frame ray through `pixel` with unit z.
    #[inline]
    pub fn ray(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project_camera(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Same camera at `1/factor` resolution.
    pub fn downscaled(&self, factor: usize) -> Intrinsics {
        let f = factor as f64;
        Intrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).norm();
    if !(err < 1e-9) {
        return Err(Error::InvalidPose(format!("rotation not orthonormal (|RtR - I| = {err:e})")));
    }
    let det = r.determinant();
    if det <= 0.0 {
        return Err(Error::InvalidPose(format!("rotation has determinant {det}")));
    }
    Ok(())
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// From a COLMAP-order quaternion `(qw, qx, qy, qz)` and translation.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(quat.norm() > 1e-12) {
            return Err(Error::InvalidPose("zero quaternion".into()));
        }
        let rotation = UnitQuaternion::from_quaternion(quat).to_rotation_matrix().into_inner();
        Pose::new(rotation, translation)
    }

    /// `(qw, qx, qy, qz)` with `qw >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let mut c = [q.w, q.i, q.j, q.k];
        if c[0] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        c
    }

    /// Camera looking from `eye` at `target`; `up` is the approximate world
    /// direction that should appear towards negative image `y`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye coincides with target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidPose("up vector parallel to viewing direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Pose::new(rotation, translation)
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn inverse_transform(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x_cam - self.translation)
    }

    /// Camera centre in world coordinates, `-W^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Maps reference-camera coordinates to neighbour-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }
}

/// Intrinsics plus pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Camera { intrinsics, pose }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        project(&self.intrinsics, &self.pose, x)
    }

    pub fn backproject(&self, pixel: Vector2<f64>, z: f64) -> Result<Vector3<f64>> {
        backproject(&self.intrinsics, pixel, z, &self.pose)
    }
}

/// Local plane `n^T X + d = 0` in a camera frame: `n` is a unit normal
/// facing the camera (`n^T K^-1 p~ < 0` at pixels that see the plane) and
/// `d > 0` is the distance from the camera centre to the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHypothesis {
    pub normal: Vector3<f64>,
    pub distance: f64,
}

impl PlaneHypothesis {
    pub fn new(normal: Vector3<f64>, distance: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::InvalidPlane("normal has zero length".into()));
        }
        if !(distance > 0.0) || !distance.is_finite() {
            return Err(Error::InvalidPlane(format!("distance must be positive, got {distance}")));
        }
        Ok(PlaneHypothesis {
            normal: normal / len,
            distance,
        })
    }

    /// Depth at which the ray `K^-1 p~` (unit z) meets the plane.
    #[inline]
    pub fn depth_along(&self, ray: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(ray);
        if denom.abs() < 1e-12 {
            return None;
        }
        let z = -self.distance / denom;
        (z.is_finite() && z > 0.0).then_some(z)
    }

    /// Signed distance of a camera-frame point from the plane.
    #[inline]
    pub fn residual(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) + self.distance
    }
}

/// World point to pixel and camera-frame depth.
pub fn project(k: &Intrinsics, pose: &Pose, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let p = pose.transform(x);
    if p.z <= 0.0 {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((k.project_camera(&p), p.z))
}

/// Camera-frame point `z K^-1 p~`.
pub fn backproject_camera(k: &Intrinsics, pixel: Vector2<f64>, z: f64) -> Result<Vector3<f64>> {
    if !(z > 0.0) {
        return Err(Error::DegenerateDepth(z));
    }
    Ok(k.ray(pixel) * z)
}

/// World point `W^T (z K^-1 p~ - t)`.
pub fn backproject(k: &Intrinsics, pixel: Vector2<f64>, z: f64, pose: &Pose) -> Result<Vector3<f64>> {
    Ok(pose.inverse_transform(&backproject_camera(k, pixel, z)?))
}

pub fn relative_transform(reference: &Pose, source: &Pose) -> RelativePose {
    let rotation = source.rotation * reference.rotation.transpose();
    RelativePose {
        rotation,
        translation: source.translation - rotation * reference.translation,
    }
}

/// `K (W_rel - t_rel n^T / d) K^-1` for a shared intrinsic matrix.
pub fn homography(k: &Intrinsics, rel: &RelativePose, plane: &PlaneHypothesis) -> Result<Matrix3<f64>> {
    homography_between(k, k, rel, plane)
}

/// Plane-induced homography from the reference image into the source image.
pub fn homography_between(
    k_ref: &Intrinsics,
    k_src: &Intrinsics,
    rel: &RelativePose,
    plane: &PlaneHypothesis,
) -> Result<Matrix3<f64>> {
    if !(plane.distance > 0.0) {
        return Err(Error::InvalidPlane(format!("distance must be positive, got {}", plane.distance)));
    }
    let inner = rel.rotation - rel.translation * plane.normal.transpose() / plane.distance;
    Ok(k_src.matrix() * inner * k_ref.inverse_matrix())
}

/// Applies `h` to `pixel` and normalises; `None` when the third coordinate is
/// not safely positive.
#[inline]
pub fn warp_pixel(h: &Matrix3<f64>, pixel: Vector2<f64>) -> Option<Vector2<f64>> {
    let w = h[(2, 0)] * pixel.x + h[(2, 1)] * pixel.y + h[(2, 2)];
    if w < HOMOGENEOUS_EPS {
        return None;
    }
    let u = h[(0, 0)] * pixel.x + h[(0, 1)] * pixel.y + h[(0, 2)];
    let v = h[(1, 0)] * pixel.x + h[(1, 1)] * pixel.y + h[(1, 2)];
    Some(Vector2::new(u / w, v / w))
}
