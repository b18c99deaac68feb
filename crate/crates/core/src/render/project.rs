//! EWA projection of a 3D Gaussian to a screen-space ellipse, and its
//! reverse-mode derivative.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use crate::camera::Camera;
use crate::gaussian::{quat_to_rotation, quat_to_rotation_backward, sigmoid, Gaussian};

pub const NEAR_PLANE: f64 = 0.01;
pub const COV_DILATION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Projected2DGaussian {
    pub mean2: Vector2<f64>,
    /// Dilated screen covariance (pixels^2).
    pub cov2: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    /// Shortest-axis normal in the camera frame, camera-facing.
    pub normal: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Intermediate values shared by the forward projection and its derivative.
struct ProjectionParts {
    rot: Matrix3<f64>,
    scales: Vector3<f64>,
    t_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    cov2: Matrix2<f64>,
    axis: usize,
    normal_sign: f64,
}

fn parts(g: &Gaussian, camera: &Camera) -> Option<ProjectionParts> {
    let k = &camera.intrinsics;
    let w = &camera.pose.rotation;
    let t_cam = camera.pose.transform(&g.position);
    if !(t_cam.z > NEAR_PLANE) {
        return None;
    }
    let (x, y, z) = (t_cam.x, t_cam.y, t_cam.z);
    let jac = Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
    let rot = quat_to_rotation(&g.rotation);
    let scales = g.scales();
    let s2 = scales.map(|s| s * s);
    let cov = rot * Matrix3::from_diagonal(&s2) * rot.transpose();
    let cov_cam = w * cov * w.transpose();
    let cov2 = jac * cov_cam * jac.transpose() + Matrix2::identity() * COV_DILATION;
    let axis = g.shortest_axis();
    let n_cam: Vector3<f64> = w * rot.column(axis);
    // camera-facing: n . (0 - t_cam) > 0
    let normal_sign = if n_cam.dot(&t_cam) > 0.0 { -1.0 } else { 1.0 };
    Some(ProjectionParts {
        rot,
        scales,
        t_cam,
        jac,
        cov_cam,
        cov2,
        axis,
        normal_sign,
    })
}

/// Projects `g` into `camera`; `None` when culled by the near plane or a
/// degenerate screen covariance.
pub fn project_to_2d(g: &Gaussian, camera: &Camera) -> Option<Projected2DGaussian> {
    let p = parts(g, camera)?;
    let det = p.cov2.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = p.cov2.try_inverse()?;
    let k = &camera.intrinsics;
    let n_cam: Vector3<f64> = camera.pose.rotation * p.rot.column(p.axis) * p.normal_sign;
    Some(Projected2DGaussian {
        mean2: k.project_camera(&p.t_cam),
        cov2: p.cov2,
        conic,
        depth: p.t_cam.z,
        normal: n_cam,
        opacity: sigmoid(g.opacity_raw),
        color: g.color,
    })
}

/// Upstream gradients on one projected Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProjectedGrad {
    pub mean2: Vector2<f64>,
    /// Gradient w.r.t. the conic treated as a general 2x2 matrix.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub normal: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl ProjectedGrad {
    pub fn accumulate(&mut self, other: &ProjectedGrad) {
        self.mean2 += other.mean2;
        self.conic += other.conic;
        self.depth += other.depth;
        self.normal += other.normal;
        self.opacity += other.opacity;
        self.color += other.color;
    }
}

/// Gradient with respect to the raw learnable parameters of one Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scales: Vector3<f64>,
    pub opacity_raw: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn accumulate(&mut self, o: &GaussianGrad) {
        self.position += o.position;
        self.rotation += o.rotation;
        self.log_scales += o.log_scales;
        self.opacity_raw += o.opacity_raw;
        self.color += o.color;
    }

    pub fn scaled(&self, s: f64) -> GaussianGrad {
        GaussianGrad {
            position: self.position * s,
            rotation: self.rotation * s,
            log_scales: self.log_scales * s,
            opacity_raw: self.opacity_raw * s,
            color: self.color * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.opacity_raw.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// Reverse-mode derivative of [`project_to_2d`].
pub fn project_to_2d_backward(g: &Gaussian, camera: &Camera, up: &ProjectedGrad) -> GaussianGrad {
    let Some(p) = parts(g, camera) else {
        return GaussianGrad::default();
    };
    let Some(conic) = p.cov2.try_inverse() else {
        return GaussianGrad::default();
    };
    let k = &camera.intrinsics;
    let w = &camera.pose.rotation;
    let (x, y, z) = (p.t_cam.x, p.t_cam.y, p.t_cam.z);

    // conic = cov2^-1
    let d_cov2 = -conic.transpose() * up.conic * conic.transpose();
    // cov2 = J cov_cam J^T
    let d_jac: Matrix2x3<f64> = (d_cov2 + d_cov2.transpose()) * p.jac * p.cov_cam;
    let d_cov_cam: Matrix3<f64> = p.jac.transpose() * d_cov2 * p.jac;
    let d_cov: Matrix3<f64> = w.transpose() * d_cov_cam * w;
    // cov = R D R^T
    let s2 = p.scales.map(|s| s * s);
    let dm = Matrix3::from_diagonal(&s2);
    let mut d_rot: Matrix3<f64> = (d_cov + d_cov.transpose()) * p.rot * dm;
    let rdr = p.rot.transpose() * d_cov * p.rot;
    let d_log_scales = Vector3::new(2.0 * s2[0] * rdr[(0, 0)], 2.0 * s2[1] * rdr[(1, 1)], 2.0 * s2[2] * rdr[(2, 2)]);

    // normal = sign * W R[:, axis]
    let d_col: Vector3<f64> = w.transpose() * up.normal * p.normal_sign;
    for r in 0..3 {
        d_rot[(r, p.axis)] += d_col[r];
    }

    let mut d_t = Vector3::zeros();
    // mean2
    d_t.x += up.mean2.x * k.fx / z;
    d_t.y += up.mean2.y * k.fy / z;
    d_t.z += -up.mean2.x * k.fx * x / (z * z) - up.mean2.y * k.fy * y / (z * z);
    // J entries
    let z2 = z * z;
    let z3 = z2 * z;
    d_t.x += d_jac[(0, 2)] * (-k.fx / z2);
    d_t.y += d_jac[(1, 2)] * (-k.fy / z2);
    d_t.z += d_jac[(0, 0)] * (-k.fx / z2)
        + d_jac[(0, 2)] * (2.0 * k.fx * x / z3)
        + d_jac[(1, 1)] * (-k.fy / z2)
        + d_jac[(1, 2)] * (2.0 * k.fy * y / z3);
    d_t.z += up.depth;

    let o = sigmoid(g.opacity_raw);
    GaussianGrad {
        position: w.transpose() * d_t,
        rotation: quat_to_rotation_backward(&g.rotation, &d_rot),
        log_scales: d_log_scales,
        opacity_raw: up.opacity * o * (1.0 - o),
        color: up.color,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera::new(Intrinsics::new(80.0, 90.0, 16.0, 15.5, 32, 32).unwrap(), Pose::identity())
    }

    #[test]
    fn isotropic_on_axis_closed_form() {
        let cam = camera();
        let (sigma, z) = (0.2, 4.0);
        let g = Gaussian::new(Vector3::new(0.0, 0.0, z), Vector3::repeat(sigma), 0.5, Vector3::zeros());
        let p = project_to_2d(&g, &cam).unwrap();
        let ex = (80.0 * sigma / z).powi(2) + COV_DILATION;
        let ey = (90.0 * sigma / z).powi(2) + COV_DILATION;
        assert!((p.cov2[(0, 0)] - ex).abs() < 1e-12);
        assert!((p.cov2[(1, 1)] - ey).abs() < 1e-12);
        assert!(p.cov2[(0, 1)].abs() < 1e-12);
        assert_eq!(p.mean2, Vector2::new(16.0, 15.5));

        let far = Gaussian::new(Vector3::new(0.0, 0.0, 2.0 * z), Vector3::repeat(sigma), 0.5, Vector3::zeros());
        let q = project_to_2d(&far, &cam).unwrap();
        let sd_near = (p.cov2[(0, 0)] - COV_DILATION).sqrt();
        let sd_far = (q.cov2[(0, 0)] - COV_DILATION).sqrt();
        assert!((sd_near / sd_far - 2.0).abs() < 1e-12);
    }

    #[test]
    fn culls_behind_and_near() {
        let cam = camera();
        let g = Gaussian::new(Vector3::new(0.0, 0.0, -1.0), Vector3::repeat(0.1), 0.5, Vector3::zeros());
        assert!(project_to_2d(&g, &cam).is_none());
        let g = Gaussian::new(Vector3::new(0.0, 0.0, 0.005), Vector3::repeat(0.1), 0.5, Vector3::zeros());
        assert!(project_to_2d(&g, &cam).is_none());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = Camera::new(
            Intrinsics::new(70.0, 75.0, 15.0, 17.0, 32, 32).unwrap(),
            Pose::look_at(Vector3::new(0.3, -0.2, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap(),
        );
        for _ in 0..20 {
            let g = Gaussian {
                position: Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                rotation: Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                log_scales: Vector3::from_fn(|_, _| rng.random_range(-2.5..-1.0)),
                opacity_raw: rng.random_range(-2.0..2.0),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            };
            let up = ProjectedGrad {
                mean2: Vector2::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                conic: Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                depth: rng.random_range(-1.0..1.0),
                normal: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                opacity: rng.random_range(-1.0..1.0),
                color: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            };
            let objective = |g: &Gaussian| {
                let p = project_to_2d(g, &cam).unwrap();
                up.mean2.dot(&p.mean2)
                    + up.conic.component_mul(&p.conic).sum()
                    + up.depth * p.depth
                    + up.normal.dot(&p.normal)
                    + up.opacity * p.opacity
                    + up.color.dot(&p.color)
            };
            let analytic = project_to_2d_backward(&g, &cam, &up);
            let h = 1e-6;
            let check = |i: usize, a: f64, perturb: &dyn Fn(&mut Gaussian, f64)| {
                let mut gp = g.clone();
                perturb(&mut gp, h);
                let mut gm = g.clone();
                perturb(&mut gm, -h);
                let fd = (objective(&gp) - objective(&gm)) / (2.0 * h);
                assert!((fd - a).abs() <= 1e-5 * (1.0 + fd.abs().max(a.abs())), "param {i}: fd {fd} vs {a}");
            };
            for i in 0..3 {
                check(i, analytic.position[i], &|g, d| g.position[i] += d);
                check(3 + i, analytic.log_scales[i], &|g, d| g.log_scales[i] += d);
                check(6 + i, analytic.color[i], &|g, d| g.color[i] += d);
            }
            for i in 0..4 {
                check(9 + i, analytic.rotation[i], &|g, d| g.rotation[i] += d);
            }
            check(13, analytic.opacity_raw, &|g, d| g.opacity_raw += d);
        }
    }
}
