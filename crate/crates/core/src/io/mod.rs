//! Scene, image and cloud files.

pub mod colmap;
pub mod image;
pub mod ply;
pub mod scene;
pub mod synthetic;

pub use colmap::{read_colmap, write_colmap, ColmapModel, SparsePoint};
pub use image::{read_pfm, read_pfm_gray, read_pfm_rgb, read_ppm, write_pfm_gray, write_pfm_rgb, write_ppm, FloatMap};
pub use ply::{read_ply, write_ply};
pub use scene::{init_cloud_from_points, CameraView, Scene};
pub use synthetic::{generate_synthetic, SyntheticSceneSpec};
