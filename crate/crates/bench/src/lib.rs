//! Fixtures shared by the benchmarks.

use splatprop::io::synthetic::{CameraArc, PlaneSpec, SyntheticSceneSpec, TextureKind};
use splatprop::io::{generate_synthetic, init_cloud_from_points};
use splatprop::{GaussianCloud, Scene};

/// Textured wall and floor seen by `views` cameras.
pub fn scene(width: usize, height: usize, views: usize) -> Scene {
    let plane = |normal, offset, seed| PlaneSpec {
        normal,
        offset,
        texture: TextureKind::ValueNoise,
        seed,
        scale: 0.1,
        contrast: 1.0,
        color: [0.5, 0.5, 0.5],
    };
    let spec = SyntheticSceneSpec {
        planes: vec![plane([0.0, 0.0, 1.0], 2.5, 1), plane([0.0, 1.0, 0.0], -0.6, 2)],
        cameras: CameraArc {
            count: views,
            radius: 2.5,
            target: [0.0, -0.3, 1.0],
            height: 0.5,
            span_deg: 24.0,
        },
        width,
        height,
        focal: None,
        noise: 0.0,
        seed: 3,
        num_points: 2000,
        point_floor: 1e-3,
    };
    generate_synthetic(&spec).expect("bench scene")
}

/// The scene's sparse points as a cloud.
pub fn cloud(scene: &Scene) -> GaussianCloud {
    init_cloud_from_points(&scene.points, scene.camera_extent()).expect("bench cloud")
}
