//! Posed image collections on disk.
//!
//! Layout of a scene directory:
//!
//! ```text
//! scene/
//!   sparse/cameras.txt, images.txt, points3D.txt
//!   images/<name>            8-bit PPM, one per images.txt entry
//!   gt/<stem>.depth.pfm      optional ground truth
//!   gt/<stem>.normal.pfm
//! ```
//!
//! The COLMAP files may also sit directly in the scene directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Vector4};

use super::colmap::{read_colmap, write_colmap, ColmapCamera, ColmapImage, ColmapModel, SparsePoint};
use super::image::{read_pfm_gray, read_pfm_rgb, read_ppm, write_pfm_gray, write_pfm_rgb, write_ppm};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{logit, Gaussian, GaussianCloud};
use crate::grid::Grid;
use crate::knn::mean_neighbor_distances;
use crate::loss::RgbImage;

/// Opacity given to every freshly initialised Gaussian.
pub const INITIAL_OPACITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: u32,
    pub name: String,
    pub camera: Camera,
    /// Linear RGB in `[0, 1]`, same size as the camera.
    pub image: RgbImage,
    pub gt_depth: Option<Grid<f64>>,
    /// Camera-frame, camera-facing.
    pub gt_normal: Option<Grid<Vector3<f64>>>,
}

impl CameraView {
    pub fn stem(&self) -> &str {
        Path::new(&self.name).file_stem().and_then(|s| s.to_str()).unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub views: Vec<CameraView>,
    pub points: Vec<SparsePoint>,
}

fn sparse_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("sparse");
    if nested.join("cameras.txt").exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

impl Scene {
    pub fn load(dir: impl AsRef<Path>) -> Result<Scene> {
        let dir = dir.as_ref();
        let model = read_colmap(sparse_dir(dir))?;
        let mut views = Vec::with_capacity(model.images.len());
        for img in &model.images {
            let k = model.cameras[&img.camera_id].intrinsics;
            let path = dir.join("images").join(&img.name);
            let image = read_ppm(&path)?;
            if image.width != k.width || image.height != k.height {
                return Err(Error::format(
                    &path,
                    format!("image is {}x{} but its camera is {}x{}", image.width, image.height, k.width, k.height),
                ));
            }
            let mut view = CameraView {
                id: img.id,
                name: img.name.clone(),
                camera: Camera::new(k, img.pose),
                image,
                gt_depth: None,
                gt_normal: None,
            };
            let gt = dir.join("gt");
            let dp = gt.join(format!("{}.depth.pfm", view.stem()));
            let np = gt.join(format!("{}.normal.pfm", view.stem()));
            if dp.exists() {
                view.gt_depth = Some(read_pfm_gray(&dp)?);
            }
            if np.exists() {
                view.gt_normal = Some(read_pfm_rgb(&np)?);
            }
            views.push(view);
        }
        views.sort_by_key(|v| v.id);
        Ok(Scene {
            views,
            points: model.points,
        })
    }

    /// Writes the layout described in the module docs. One COLMAP camera is
    /// emitted per view.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        let mut cameras = BTreeMap::new();
        let mut images = Vec::new();
        for v in &self.views {
            cameras.insert(
                v.id,
                ColmapCamera {
                    id: v.id,
                    intrinsics: v.camera.intrinsics,
                },
            );
            images.push(ColmapImage {
                id: v.id,
                camera_id: v.id,
                pose: v.camera.pose,
                name: v.name.clone(),
            });
            write_ppm(images_dir.join(&v.name), &v.image)?;
            if v.gt_depth.is_some() || v.gt_normal.is_some() {
                let gt = dir.join("gt");
                fs::create_dir_all(&gt).map_err(|e| Error::io(&gt, e))?;
                if let Some(d) = &v.gt_depth {
                    write_pfm_gray(gt.join(format!("{}.depth.pfm", v.stem())), d)?;
                }
                if let Some(n) = &v.gt_normal {
                    write_pfm_rgb(gt.join(format!("{}.normal.pfm", v.stem())), n)?;
                }
            }
        }
        write_colmap(
            dir.join("sparse"),
            &ColmapModel {
                cameras,
                images,
                points: self.points.clone(),
            },
        )
    }

    pub fn view_by_id(&self, id: u32) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera).collect()
    }

    /// 1.1 times the largest distance from a camera centre to their mean;
    /// the natural length unit of the scene.
    pub fn camera_extent(&self) -> f64 {
        if self.views.is_empty() {
            return 0.0;
        }
        let centers: Vec<Vector3<f64>> = self.views.iter().map(|v| v.camera.center()).collect();
        let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
        let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        // a single camera or cameras at one spot still need a length unit
        if radius > 0.0 {
            1.1 * radius
        } else {
            1.0
        }
    }
}

/// One isotropic Gaussian per sparse point, scaled by the mean distance to
/// its three nearest neighbours (0.1 of `scene_extent` for a lone point).
pub fn init_cloud_from_points(points: &[SparsePoint], scene_extent: f64) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let pos: Vec<Vector3<f64>> = points.iter().map(|p| p.position).collect();
    let spacing = mean_neighbor_distances(&pos, &pos, Some(0), 3);
    let opacity_raw = logit(INITIAL_OPACITY);
    Ok(points
        .iter()
        .zip(spacing)
        .map(|(p, s)| {
            let s = s.unwrap_or(0.1 * scene_extent);
            Gaussian {
                position: p.position,
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                log_scales: Vector3::repeat(s.ln()),
                opacity_raw,
                color: p.color,
            }
        })
        .collect())
}
