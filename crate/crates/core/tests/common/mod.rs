#![allow(dead_code)]

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatprop::camera::{Camera, Intrinsics, Pose};
use splatprop::gaussian::{Gaussian, GaussianCloud};
use splatprop::grid::Grid;
use splatprop::io::synthetic::{CameraArc, PlaneSpec, SyntheticSceneSpec, TextureKind};
use splatprop::render::{project_to_2d, GeoMaps, ALPHA_EPS, ALPHA_MAX, SUPPORT_RADIUS2, TRANSMITTANCE_MIN};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn plane(normal: [f64; 3], offset: f64, texture: TextureKind, seed: u64, contrast: f64, color: [f64; 3]) -> PlaneSpec {
    PlaneSpec {
        normal,
        offset,
        texture,
        seed,
        scale: 0.1,
        contrast,
        color,
    }
}

/// A textured wall at `z = 2.5` and a textured floor at `y = 0.6` (below the
/// cameras, which look slightly down).
pub fn two_plane_spec(width: usize, height: usize, views: usize, seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        planes: vec![
            plane([0.0, 0.0, 1.0], 2.5, TextureKind::ValueNoise, seed, 1.0, [0.5, 0.5, 0.5]),
            plane([0.0, 1.0, 0.0], -0.6, TextureKind::ValueNoise, seed + 100, 1.0, [0.45, 0.5, 0.55]),
        ],
        cameras: CameraArc {
            count: views,
            radius: 2.5,
            target: [0.0, -0.3, 1.0],
            height: 0.5,
            span_deg: 24.0,
        },
        width,
        height,
        focal: Some(width as f64),
        noise: 0.0,
        seed,
        num_points: 200,
        point_floor: 1e-3,
    }
}

/// Low-contrast floor that gets almost no sparse points plus a strongly
/// textured wall that gets most of them.
pub fn textureless_floor_spec(width: usize, height: usize, views: usize, seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        planes: vec![
            plane([0.0, 0.0, 1.0], 2.5, TextureKind::ValueNoise, seed, 1.0, [0.5, 0.45, 0.4]),
            plane([0.0, 1.0, 0.0], -0.6, TextureKind::ValueNoise, seed + 100, 0.04, [0.6, 0.6, 0.65]),
        ],
        cameras: CameraArc {
            count: views,
            radius: 2.5,
            target: [0.0, -0.3, 1.0],
            height: 0.6,
            span_deg: 30.0,
        },
        width,
        height,
        focal: Some(width as f64),
        noise: 0.0,
        seed,
        num_points: 200,
        point_floor: 1e-6,
    }
}

pub fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_quat(rng: &mut impl Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if q.norm() > 0.2 {
            return q;
        }
    }
}

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    let q = random_quat(rng).normalize();
    let t = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    Pose::from_quaternion([q[0], q[1], q[2], q[3]], t).unwrap()
}

/// Random Gaussians in front of an identity camera looking down `+z`.
pub fn random_cloud(rng: &mut impl Rng, n: usize, depth: std::ops::Range<f64>, spread: f64) -> GaussianCloud {
    (0..n)
        .map(|_| {
            let z = rng.random_range(depth.clone());
            Gaussian {
                position: Vector3::new(rng.random_range(-spread..spread) * z, rng.random_range(-spread..spread) * z, z),
                rotation: random_quat(rng),
                log_scales: Vector3::from_fn(|_, _| rng.random_range(-3.5f64..-1.5)),
                opacity_raw: rng.random_range(-2.0..3.0),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            }
        })
        .collect()
}

pub fn small_camera(width: usize, height: usize, pose: Pose) -> Camera {
    let f = width as f64 * 1.1;
    Camera::new(
        Intrinsics::new(f, f * 1.05, (width as f64 - 1.0) / 2.0 + 0.3, (height as f64 - 1.0) / 2.0 - 0.2, width, height).unwrap(),
        pose,
    )
}

/// Reference compositor: sorts every projected Gaussian once by (depth,
/// index) and blends each pixel over the whole list, with no tiling.
pub fn brute_force_render(camera: &Camera, cloud: &GaussianCloud) -> GeoMaps {
    let (w, h) = (camera.width(), camera.height());
    let mut proj: Vec<(usize, _)> = cloud.iter().enumerate().filter_map(|(i, g)| project_to_2d(g, camera).map(|p| (i, p))).collect();
    proj.sort_by(|a, b| a.1.depth.total_cmp(&b.1.depth).then(a.0.cmp(&b.0)));
    let mut out = GeoMaps::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let mut color = Vector3::zeros();
            let mut depth = 0.0;
            let mut normal = Vector3::zeros();
            for (_, p) in &proj {
                if t < TRANSMITTANCE_MIN {
                    break;
                }
                let d = nalgebra::Vector2::new(x as f64, y as f64) - p.mean2;
                let m2 = (d.transpose() * p.conic * d)[(0, 0)];
                if !(m2 <= SUPPORT_RADIUS2) {
                    continue;
                }
                let alpha = (p.opacity * (-0.5 * m2).exp()).min(ALPHA_MAX);
                let wgt = alpha * t;
                color += p.color * wgt;
                depth += p.depth * wgt;
                normal += p.normal * wgt;
                t *= 1.0 - alpha;
            }
            let acc = 1.0 - t;
            let i = y * w + x;
            out.color.data[i] = color;
            out.alpha.data[i] = acc;
            if acc > ALPHA_EPS {
                out.depth.data[i] = depth / acc;
                let len = normal.norm();
                if len > 1e-12 {
                    out.normal.data[i] = normal / len;
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff3(a: &Grid<Vector3<f64>>, b: &Grid<Vector3<f64>>) -> f64 {
    a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs().max()).fold(0.0, f64::max)
}

/// Prints one acceptance line and returns whether it passed.
pub fn report(name: &str, pass: bool, detail: &str) -> bool {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

/// Rendered maps that carry the ground truth at a random `fraction` of
/// pixels and a random camera-facing plane everywhere else.
pub fn seeded_maps(view: &splatprop::CameraView, fraction: f64, rng: &mut impl Rng) -> GeoMaps {
    let gt_d = view.gt_depth.as_ref().unwrap();
    let gt_n = view.gt_normal.as_ref().unwrap();
    let (w, h) = (gt_d.width, gt_d.height);
    let mut maps = GeoMaps::empty(w, h);
    let k = view.camera.intrinsics;
    for i in 0..w * h {
        maps.alpha.data[i] = 1.0;
        if rng.random_bool(fraction) {
            maps.depth.data[i] = gt_d.data[i];
            maps.normal.data[i] = gt_n.data[i];
        } else {
            let ray = k.ray(nalgebra::Vector2::new((i % w) as f64, (i / w) as f64));
            let mut n = random_unit(rng);
            if n.dot(&ray) > 0.0 {
                n = -n;
            }
            maps.depth.data[i] = gt_d.data[i] * rng.random_range(0.5..2.0);
            maps.normal.data[i] = n;
        }
    }
    maps
}

/// One view of the gradient-check objective: a random target image and a
/// random propagated normal map with a random valid mask.
pub struct FdView {
    pub camera: Camera,
    pub target: Grid<Vector3<f64>>,
    pub normals: Grid<Vector3<f64>>,
    pub valid: Grid<bool>,
}

pub fn fd_views(rng: &mut impl Rng, width: usize, height: usize, count: usize) -> Vec<FdView> {
    (0..count)
        .map(|i| {
            let pose = if i == 0 {
                Pose::identity()
            } else {
                let eye = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3));
                Pose::look_at(eye, Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, 1.0, 0.0)).unwrap()
            };
            FdView {
                camera: small_camera(width, height, pose),
                target: Grid::from_fn(width, height, |_, _| Vector3::from_fn(|_, _| rng.random_range(0.0..1.0))),
                normals: Grid::from_fn(width, height, |_, _| {
                    let mut n = random_unit(rng);
                    if n.z > 0.0 {
                        n = -n;
                    }
                    n
                }),
                valid: Grid::from_fn(width, height, |_, _| rng.random_bool(0.7)),
            }
        })
        .collect()
}

/// Which part of the training objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Photometric,
    Normal,
    Scale,
}

/// Value, analytic gradient and a fingerprint of every discrete branch
/// (renderer decisions plus the signs the L1 and normal terms switch on).
pub fn objective(cloud: &GaussianCloud, views: &[FdView], term: Term) -> (f64, Vec<splatprop::render::GaussianGrad>, u64) {
    use splatprop::loss::{l1_dssim, normal_loss, scale_loss, Reduction};
    use splatprop::render::{Frame, GaussianGrad, MapGradients};
    use std::hash::{DefaultHasher, Hash, Hasher};

    let mut hasher = DefaultHasher::new();
    let mut value = 0.0;
    let mut grads = vec![GaussianGrad::default(); cloud.len()];
    if term == Term::Scale {
        let (v, g) = scale_loss(cloud);
        for (dst, s) in grads.iter_mut().zip(&g) {
            dst.log_scales = *s;
        }
        for g in cloud.iter() {
            g.shortest_axis().hash(&mut hasher);
        }
        return (v, grads, hasher.finish());
    }
    for v in views {
        let frame = Frame::prepare(&v.camera, cloud);
        frame.branch_signature(cloud).hash(&mut hasher);
        let maps = frame.forward();
        let mut up = MapGradients::zeros(v.camera.width(), v.camera.height());
        match term {
            Term::Photometric => {
                let l = l1_dssim(&maps.color, &v.target, 0.2).unwrap();
                value += l.value;
                up.color = l.grad;
                for (r, t) in maps.color.data.iter().zip(&v.target.data) {
                    for c in 0..3 {
                        (r[c] > t[c]).hash(&mut hasher);
                    }
                }
            }
            Term::Normal => {
                let l = normal_loss(&maps.normal, &v.normals, &v.valid, Reduction::Mean).unwrap();
                value += l.value;
                up.normal = l.grad;
                for (r, t) in maps.normal.data.iter().zip(&v.normals.data) {
                    for c in 0..3 {
                        (r[c] > t[c]).hash(&mut hasher);
                    }
                }
            }
            Term::Scale => unreachable!(),
        }
        for (dst, g) in grads.iter_mut().zip(frame.backward(cloud, &up).gaussians) {
            dst.accumulate(&g);
        }
    }
    (value, grads, hasher.finish())
}

pub fn param_mut(g: &mut Gaussian, k: usize) -> &mut f64 {
    match k {
        0..3 => &mut g.position[k],
        3..7 => &mut g.rotation[k - 3],
        7..10 => &mut g.log_scales[k - 7],
        10 => &mut g.opacity_raw,
        _ => &mut g.color[k - 11],
    }
}

pub fn param_grad(g: &splatprop::render::GaussianGrad, k: usize) -> f64 {
    match k {
        0..3 => g.position[k],
        3..7 => g.rotation[k - 3],
        7..10 => g.log_scales[k - 7],
        10 => g.opacity_raw,
        _ => g.color[k - 11],
    }
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Central differences over every parameter of every Gaussian. The step
/// starts at 1e-4 and shrinks until both probes stay on the same smooth
/// piece as the base point; parameters where that never happens are
/// skipped and counted.
pub fn check_gradients(cloud: &GaussianCloud, views: &[FdView], term: Term, tol: f64) -> FdReport {
    let (_, grads, base_sig) = objective(cloud, views, term);
    let scale = grads
        .iter()
        .flat_map(|g| (0..14).map(move |k| param_grad(g, k).abs()))
        .fold(0.0, f64::max);
    let floor = 1e-4 * scale + 1e-12;
    let mut rep = FdReport::default();
    for i in 0..cloud.len() {
        for k in 0..14 {
            let analytic = param_grad(&grads[i], k);
            let mut numeric = None;
            let mut h = 1e-4;
            while h > 1e-8 {
                let probe = |s: f64| {
                    let mut c = cloud.clone();
                    *param_mut(&mut c.gaussians[i], k) += s;
                    let (v, _, sig) = objective(&c, views, term);
                    (v, sig)
                };
                let (vp, sp) = probe(h);
                let (vm, sm) = probe(-h);
                if sp == base_sig && sm == base_sig {
                    numeric = Some((vp - vm) / (2.0 * h));
                    break;
                }
                h *= 0.1;
            }
            let Some(numeric) = numeric else {
                rep.skipped += 1;
                continue;
            };
            rep.checked += 1;
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            rep.worst = rep.worst.max(err);
            if err >= tol {
                rep.failures.push(format!("gaussian {i} param {k}: analytic {analytic:.6e} numeric {numeric:.6e}"));
            }
        }
    }
    rep
}

/// Width, height and view count of the end-to-end scene.
pub const E2E_SIZE: (usize, usize, usize) = (64, 48, 10);
pub const E2E_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Control (clone/split only), propagation only, and the full pipeline.
pub fn e2e_arms(seed: u64) -> [(&'static str, splatprop::TrainConfig); 3] {
    let full = splatprop::TrainConfig {
        seed,
        max_gaussians: 4000,
        ..Default::default()
    };
    let mut prop = full.clone();
    prop.loss.beta = 0.0;
    prop.loss.gamma = 0.0;
    [("control", full.clone().control()), ("propagation", prop), ("full", full)]
}
