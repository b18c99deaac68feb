//! The 3D Gaussian primitive and the cloud that holds them.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::Pose;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalised quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// Pulls a gradient on the rotation matrix back to the raw (unnormalised)
/// quaternion.
pub fn quat_to_rotation_backward(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = |m: Matrix3<f64>| d_r.component_mul(&m).sum();
    let dw = g(Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0));
    let dx = g(Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    ));
    let dy = g(Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    ));
    let dz = g(Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    ));
    let du = Vector4::new(dw, dx, dy, dz);
    (du - u * u.dot(&du)) / n
}

/// Quaternion `(w, x, y, z)` of a rotation whose column `column` is `axis`.
pub fn quat_with_axis(column: usize, axis: &Vector3<f64>) -> Vector4<f64> {
    let a = axis.normalize();
    let e = Vector3::ith(column, 1.0);
    let flip = Vector3::ith((column + 1) % 3, 1.0);
    let q = UnitQuaternion::rotation_between(&e, &a)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(flip), std::f64::consts::PI));
    Vector4::new(q.w, q.i, q.j, q.k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Raw quaternion `(w, x, y, z)`; normalised on use.
    pub rotation: Vector4<f64>,
    pub log_scales: Vector3<f64>,
    pub opacity_raw: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn new(position: Vector3<f64>, scales: Vector3<f64>, opacity: f64, color: Vector3<f64>) -> Self {
        Gaussian {
            position,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scales: scales.map(f64::ln),
            opacity_raw: logit(opacity),
            color,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.rotation)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_raw)
    }

    /// `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = self.scales().map(|s| s * s);
        r * Matrix3::from_diagonal(&s2) * r.transpose()
    }

    /// Camera-frame depth of the centre.
    pub fn view_depth(&self, pose: &Pose) -> f64 {
        pose.transform(&self.position).z
    }

    /// Index of the smallest scale, lowest index on ties.
    pub fn shortest_axis(&self) -> usize {
        let s = &self.log_scales;
        let mut best = 0;
        for i in 1..3 {
            if s[i] < s[best] {
                best = i;
            }
        }
        best
    }

    /// Shortest-axis column of `R`, oriented towards `camera_center`.
    pub fn shortest_axis_normal(&self, camera_center: &Vector3<f64>) -> Vector3<f64> {
        let r = self.rotation_matrix();
        let n: Vector3<f64> = r.column(self.shortest_axis()).into();
        if n.dot(&(camera_center - self.position)) < 0.0 {
            -n
        } else {
            n
        }
    }
}

/// Scene primitives plus the positional-gradient statistics that drive
/// clone/split densification.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let n = gaussians.len();
        GaussianCloud {
            gaussians,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.gaussians.push(g);
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
    }

    /// Adds one observation of a screen-space positional gradient norm.
    pub fn record_gradient(&mut self, index: usize, norm: f64) {
        self.grad_accum[index] += norm;
        self.grad_count[index] += 1;
    }

    /// Mean recorded gradient norm, zero when never observed.
    pub fn mean_gradient(&self, index: usize) -> f64 {
        match self.grad_count[index] {
            0 => 0.0,
            c => self.grad_accum[index] / c as f64,
        }
    }

    pub fn observation_count(&self, index: usize) -> u32 {
        self.grad_count[index]
    }

    pub fn reset_statistics(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
    }

    /// Rebuilds the cloud from `gaussians`, clearing statistics.
    pub fn replace(&mut self, gaussians: Vec<Gaussian>) {
        *self = GaussianCloud::new(gaussians);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    /// Half-diagonal of the bounding box of all centres.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.position);
            hi = hi.sup(&g.position);
        }
        (hi - lo).norm() * 0.5
    }
}

impl FromIterator<Gaussian> for GaussianCloud {
    fn from_iter<I: IntoIterator<Item = Gaussian>>(iter: I) -> Self {
        GaussianCloud::new(iter.into_iter().collect())
    }
}
