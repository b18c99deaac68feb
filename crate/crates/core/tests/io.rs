mod common;

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use splatprop::camera::Intrinsics;
use splatprop::io::colmap::{ColmapCamera, ColmapImage};
use splatprop::io::synthetic::generate_synthetic;
use splatprop::io::{read_colmap, read_ply, write_colmap, write_ply, ColmapModel, SparsePoint};
use splatprop::propagation::plane_from_pixel;
use splatprop::Scene;

#[test]
fn colmap_round_trip_preserves_cameras_and_poses() {
    let mut rng = common::rng(21);
    let mut cameras = BTreeMap::new();
    let mut images = Vec::new();
    for id in 1..=6u32 {
        let f = rng.random_range(100.0..900.0);
        let k = Intrinsics::new(f, f * rng.random_range(0.95..1.05), rng.random_range(100.0..200.0), rng.random_range(80.0..160.0), 320, 240).unwrap();
        cameras.insert(id, ColmapCamera { id, intrinsics: k });
        images.push(ColmapImage {
            id: id + 10,
            camera_id: id,
            pose: common::random_pose(&mut rng),
            name: format!("frame_{id:03}.ppm"),
        });
    }
    let points: Vec<SparsePoint> = (0..50)
        .map(|_| SparsePoint {
            position: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            color: Vector3::from_fn(|_, _| rng.random_range(0..=255u8) as f64 / 255.0),
        })
        .collect();
    let model = ColmapModel { cameras, images, points };
    let dir = tempfile::tempdir().unwrap();
    write_colmap(dir.path(), &model).unwrap();
    let back = read_colmap(dir.path()).unwrap();

    assert_eq!(back.cameras.len(), model.cameras.len());
    for (id, c) in &model.cameras {
        let (a, b) = (c.intrinsics, back.cameras[id].intrinsics);
        for (x, y) in [(a.fx, b.fx), (a.fy, b.fy), (a.cx, b.cx), (a.cy, b.cy)] {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
        assert_eq!((a.width, a.height), (b.width, b.height));
    }
    assert_eq!(back.images.len(), model.images.len());
    for (a, b) in model.images.iter().zip(&back.images) {
        assert_eq!((a.id, a.camera_id, &a.name), (b.id, b.camera_id, &b.name));
        assert!((a.pose.rotation - b.pose.rotation).amax() <= 1e-9);
        assert!((a.pose.translation - b.pose.translation).amax() <= 1e-9);
    }
    for (a, b) in model.points.iter().zip(&back.points) {
        assert!((a.position - b.position).amax() <= 1e-9);
        assert!((a.color - b.color).amax() <= 1e-12);
    }
}

/// Depth and facing normal of the nearest plane along pixel `p`, computed in
/// the camera frame with no reference to the generator's world-space caster.
fn analytic_hit(spec: &splatprop::io::SyntheticSceneSpec, cam: &splatprop::Camera, p: Vector2<f64>) -> Option<(f64, Vector3<f64>, usize)> {
    let ray = cam.intrinsics.ray(p);
    let mut best: Option<(f64, Vector3<f64>, usize)> = None;
    for (i, plane) in spec.planes.iter().enumerate() {
        let n = Vector3::from(plane.normal).normalize();
        let offset = plane.offset / Vector3::from(plane.normal).norm();
        let mut nc = cam.pose.rotation * n;
        let mut d = -nc.dot(&cam.pose.translation) - offset;
        if d < 0.0 {
            nc = -nc;
            d = -d;
        }
        let denom = nc.dot(&ray);
        if denom >= 0.0 {
            continue;
        }
        let z = -d / denom;
        if best.is_none_or(|b| z < b.0) {
            best = Some((z, nc, i));
        }
    }
    best
}

#[test]
fn synthetic_maps_match_analytic_ray_casts() {
    let spec = common::two_plane_spec(80, 60, 3, 17);
    let scene = generate_synthetic(&spec).unwrap();
    for v in &scene.views {
        let gd = v.gt_depth.as_ref().unwrap();
        let gn = v.gt_normal.as_ref().unwrap();
        let mut per_plane = [0usize; 2];
        for y in 0..60 {
            for x in 0..80 {
                let p = Vector2::new(x as f64, y as f64);
                let (z, n, which) = analytic_hit(&spec, &v.camera, p).expect("every pixel sees a plane");
                per_plane[which] += 1;
                assert!((gd.get(x, y) - z).abs() <= 1e-9 * z, "depth at ({x}, {y})");
                assert!((gn.get(x, y) - n).amax() <= 1e-9, "normal at ({x}, {y})");
            }
        }
        assert!(per_plane.iter().all(|c| *c > 200), "both planes visible: {per_plane:?}");
    }
}

#[test]
fn synthetic_depths_reproduce_plane_distances() {
    let spec = common::two_plane_spec(64, 48, 3, 19);
    let scene = generate_synthetic(&spec).unwrap();
    for v in &scene.views {
        let gd = v.gt_depth.as_ref().unwrap();
        let gn = v.gt_normal.as_ref().unwrap();
        let c = v.camera.center();
        for y in 0..48 {
            for x in 0..64 {
                let p = Vector2::new(x as f64, y as f64);
                let plane = plane_from_pixel(p, *gd.get(x, y), gn.get(x, y), &v.camera.intrinsics).unwrap();
                let (_, _, which) = analytic_hit(&spec, &v.camera, p).unwrap();
                let ps = &spec.planes[which];
                let n = Vector3::from(ps.normal);
                let distance = (n.dot(&c) - ps.offset).abs() / n.norm();
                assert!((plane.distance - distance).abs() <= 1e-9 * distance.max(1.0));
            }
        }
    }
}

#[test]
fn scene_survives_a_disk_round_trip() {
    let scene = generate_synthetic(&common::two_plane_spec(40, 30, 3, 23)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    scene.write(dir.path()).unwrap();
    let back = Scene::load(dir.path()).unwrap();
    assert_eq!(back.views.len(), 3);
    assert_eq!(back.points.len(), scene.points.len());
    for (a, b) in scene.views.iter().zip(&back.views) {
        assert_eq!((a.id, &a.name), (b.id, &b.name));
        assert!((a.camera.pose.rotation - b.camera.pose.rotation).amax() <= 1e-9);
        assert!((a.camera.pose.translation - b.camera.pose.translation).amax() <= 1e-9);
        assert!((a.camera.intrinsics.cx - b.camera.intrinsics.cx).abs() <= 1e-9);
        assert!(common::max_abs_diff3(&a.image, &b.image) <= 0.5 / 255.0 + 1e-12);
        let (da, db) = (a.gt_depth.as_ref().unwrap(), b.gt_depth.as_ref().unwrap());
        assert!(da.data.iter().zip(&db.data).all(|(x, y)| (x - y).abs() <= 1e-6 * x));
    }
}

#[test]
fn ply_round_trip_is_bit_exact() {
    let mut rng = common::rng(29);
    let cloud = common::random_cloud(&mut rng, 64, 1.0..4.0, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    write_ply(&path, &cloud).unwrap();
    assert_eq!(read_ply(&path).unwrap().gaussians, cloud.gaussians);
}

#[test]
fn truncated_ply_is_an_error() {
    let mut rng = common::rng(31);
    let cloud = common::random_cloud(&mut rng, 8, 1.0..4.0, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    write_ply(&path, &cloud).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 17]).unwrap();
    let err = read_ply(&path).unwrap_err().to_string();
    assert!(err.contains("cloud.ply"), "{err}");
}
