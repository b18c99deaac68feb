//! Turning propagated geometry into new Gaussians, plus gradient-driven
//! clone/split/prune.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{logit, quat_with_axis, Gaussian, GaussianCloud};
use crate::grid::Grid;
use crate::io::scene::CameraView;
use crate::knn::mean_neighbor_distances;
use crate::propagation::PropagatedMaps;
use crate::render::{GeoMaps, ALPHA_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub max_reprojection_px: f64,
    pub max_relative_depth: f64,
    pub max_normal_angle_deg: f64,
    pub min_consistent_views: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_reprojection_px: 2.0,
            max_relative_depth: 0.01,
            max_normal_angle_deg: 10.0,
            min_consistent_views: 1,
        }
    }
}

/// Depth and normal of `maps` at the sub-pixel position `q`.
///
/// Inverse depth is interpolated bilinearly when all four surrounding pixels
/// are valid (exact for a plane, whose inverse depth is affine in pixel
/// coordinates); otherwise the nearest pixel is used. The normal always
/// comes from the nearest pixel.
fn lookup(maps: &PropagatedMaps, q: Vector2<f64>) -> Option<(f64, Vector3<f64>)> {
    let (w, h) = (maps.width() as i64, maps.height() as i64);
    let (nx, ny) = (q.x.round() as i64, q.y.round() as i64);
    if !(q.x.is_finite() && q.y.is_finite()) || nx < 0 || ny < 0 || nx >= w || ny >= h {
        return None;
    }
    let ni = (ny * w + nx) as usize;
    if !maps.valid.data[ni] {
        return None;
    }
    let normal = maps.normal.data[ni];
    let (x0, y0) = (q.x.floor() as i64, q.y.floor() as i64);
    if x0 >= 0 && y0 >= 0 && x0 + 1 < w && y0 + 1 < h {
        let idx = |x: i64, y: i64| (y * w + x) as usize;
        let corners = [idx(x0, y0), idx(x0 + 1, y0), idx(x0, y0 + 1), idx(x0 + 1, y0 + 1)];
        if corners.iter().all(|&i| maps.valid.data[i]) {
            let (fx, fy) = (q.x - x0 as f64, q.y - y0 as f64);
            let inv = |i: usize| 1.0 / maps.depth.data[i];
            let top = inv(corners[0]) * (1.0 - fx) + inv(corners[1]) * fx;
            let bottom = inv(corners[2]) * (1.0 - fx) + inv(corners[3]) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            return Some((1.0 / v, normal));
        }
    }
    Some((maps.depth.data[ni], normal))
}

fn consistent(
    p: Vector2<f64>,
    z: f64,
    world_normal: &Vector3<f64>,
    cam_i: &Camera,
    cam_j: &Camera,
    maps_j: &PropagatedMaps,
    cfg: &FilterConfig,
    cos_min: f64,
) -> bool {
    let Ok(x) = cam_i.backproject(p, z) else { return false };
    let Ok((q, _)) = cam_j.project(&x) else { return false };
    let Some((zj, nj)) = lookup(maps_j, q) else { return false };
    let Ok(xj) = cam_j.backproject(q, zj) else { return false };
    let Ok((p_back, z_back)) = cam_i.project(&xj) else { return false };
    if (p_back - p).norm() > cfg.max_reprojection_px {
        return false;
    }
    if (z_back - z).abs() / z > cfg.max_relative_depth {
        return false;
    }
    let nj_world = cam_j.pose.rotation.transpose() * nj;
    world_normal.dot(&nj_world) >= cos_min
}

/// Multi-view consistency check. A pixel survives when at least
/// `min_consistent_views` other views agree on its position, depth and
/// normal after a round trip through their own propagated maps.
pub fn geometric_filter(cameras: &[Camera], maps: &[PropagatedMaps], cfg: &FilterConfig) -> Result<Vec<PropagatedMaps>> {
    if cameras.len() != maps.len() {
        return Err(Error::DimensionMismatch(format!("{} cameras but {} propagated maps", cameras.len(), maps.len())));
    }
    for (c, m) in cameras.iter().zip(maps) {
        if c.width() != m.width() || c.height() != m.height() {
            return Err(Error::DimensionMismatch("propagated maps do not match their camera".into()));
        }
    }
    let cos_min = cfg.max_normal_angle_deg.to_radians().cos();
    Ok((0..maps.len())
        .map(|i| {
            let cam_i = &cameras[i];
            let m = &maps[i];
            let w = m.width();
            let keep: Vec<bool> = (0..m.height())
                .into_par_iter()
                .flat_map_iter(|y| {
                    (0..w).map(move |x| {
                        let idx = y * w + x;
                        if !m.valid.data[idx] {
                            return false;
                        }
                        let p = Vector2::new(x as f64, y as f64);
                        let z = m.depth.data[idx];
                        let nw = cam_i.pose.rotation.transpose() * m.normal.data[idx];
                        let agreeing = (0..maps.len())
                            .filter(|&j| j != i)
                            .filter(|&j| consistent(p, z, &nw, cam_i, &cameras[j], &maps[j], cfg, cos_min))
                            .take(cfg.min_consistent_views.max(1))
                            .count();
                        agreeing >= cfg.min_consistent_views.max(1)
                    })
                })
                .collect();
            let mut out = m.clone();
            for (idx, k) in keep.into_iter().enumerate() {
                if !k {
                    out.invalidate(idx);
                }
            }
            out
        })
        .collect())
}

/// Pixels where the filtered geometry is trusted and the current
/// Gaussians either do not cover it or disagree with it by more than
/// `sigma` in relative depth (relative to the filtered depth).
pub fn select_growth_pixels(filtered: &PropagatedMaps, rendered: &GeoMaps, sigma: f64) -> Result<Grid<bool>> {
    if filtered.width() != rendered.width() || filtered.height() != rendered.height() {
        return Err(Error::DimensionMismatch("filtered and rendered maps differ in size".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let data = (0..filtered.depth.len())
        .map(|i| {
            if !filtered.valid.data[i] {
                return false;
            }
            let f = filtered.depth.data[i];
            rendered.alpha.data[i] < ALPHA_EPS || (f - rendered.depth.data[i]).abs() / f > sigma
        })
        .collect();
    Ok(Grid::from_vec(filtered.width(), filtered.height(), data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpawnConfig {
    /// Only pixels with `x % stride == 0 && y % stride == 0` spawn.
    pub stride: usize,
    pub opacity: f64,
    /// Neighbours used for the initial isotropic scale.
    pub knn: usize,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        SpawnConfig {
            stride: 2,
            opacity: 0.1,
            knn: 3,
        }
    }
}

/// Appends one Gaussian per subsampled masked pixel and returns how many
/// were added.
///
/// Each new Gaussian sits on the back-projected filtered depth, takes the
/// pixel's color, and is isotropic with scale equal to the mean distance to
/// its three nearest neighbours among old and new centres. Its first
/// rotation column is the filtered normal (in world coordinates), so with
/// equal scales the lowest-index tie rule makes it the shortest axis.
pub fn spawn_gaussians(
    mask: &Grid<bool>,
    filtered: &PropagatedMaps,
    view: &CameraView,
    cloud: &mut GaussianCloud,
    cfg: &SpawnConfig,
) -> Result<usize> {
    let cam = &view.camera;
    if !mask.same_shape(&filtered.valid) || mask.width != cam.width() || mask.height != cam.height() {
        return Err(Error::DimensionMismatch("growth mask does not match the view".into()));
    }
    let stride = cfg.stride.max(1);
    let rt = cam.pose.rotation.transpose();
    let mut fresh: Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> = Vec::new();
    for y in (0..mask.height).step_by(stride) {
        for x in (0..mask.width).step_by(stride) {
            let i = y * mask.width + x;
            if !mask.data[i] || !filtered.valid.data[i] {
                continue;
            }
            let pos = cam.backproject(Vector2::new(x as f64, y as f64), filtered.depth.data[i])?;
            let color = view.image.data[i];
            let n = rt * filtered.normal.data[i];
            fresh.push((pos, color, n));
        }
    }
    if fresh.is_empty() {
        return Ok(0);
    }
    let mut all: Vec<Vector3<f64>> = cloud.gaussians.iter().map(|g| g.position).collect();
    let offset = all.len();
    all.extend(fresh.iter().map(|f| f.0));
    let spacing = mean_neighbor_distances(&all, &all[offset..], Some(offset), cfg.knn);
    let opacity_raw = logit(cfg.opacity);
    for ((pos, color, n), s) in fresh.iter().zip(spacing) {
        let s = match s {
            Some(s) => s,
            // a lone point: one pixel's footprint at its depth
            None => stride as f64 * cam.pose.transform(pos).z / cam.intrinsics.fx,
        };
        let rotation = if n.norm() > 0.0 {
            quat_with_axis(0, n)
        } else {
            nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0)
        };
        cloud.push(Gaussian {
            position: *pos,
            rotation,
            log_scales: Vector3::repeat(s.ln()),
            opacity_raw,
            color: *color,
        });
    }
    Ok(fresh.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean screen-space positional gradient (NDC units) above which a
    /// Gaussian is cloned or split.
    pub grad_threshold: f64,
    /// Split instead of clone when the largest scale exceeds this fraction
    /// of the scene extent.
    pub percent_dense: f64,
    pub split_scale_divisor: f64,
    pub min_opacity: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_scale_divisor: 1.6,
            min_opacity: 0.005,
        }
    }
}

/// What happened to the cloud. `origins[i]` is the pre-densification index
/// of Gaussian `i` when it survived unchanged (clone sources included), or
/// `None` for new clones and split children.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyOutcome {
    pub origins: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub fn clone_split_prune<R: Rng>(cloud: &mut GaussianCloud, cfg: &DensifyConfig, scene_extent: f64, rng: &mut R) -> DensifyOutcome {
    let split_above = cfg.percent_dense * scene_extent;
    let mut kept: Vec<(Option<usize>, Gaussian)> = Vec::with_capacity(cloud.len());
    let mut clones = Vec::new();
    let mut children = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !(cloud.mean_gradient(i) > cfg.grad_threshold) {
            kept.push((Some(i), g.clone()));
            continue;
        }
        let scales = g.scales();
        if scales.max() > split_above {
            split += 1;
            let r = g.rotation_matrix();
            let child_log_scales = (scales / cfg.split_scale_divisor).map(f64::ln);
            for _ in 0..2 {
                let eps = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let mut c = g.clone();
                c.position = g.position + r * scales.component_mul(&eps);
                c.log_scales = child_log_scales;
                children.push((None, c));
            }
        } else {
            cloned += 1;
            kept.push((Some(i), g.clone()));
            clones.push((None, g.clone()));
        }
    }
    kept.extend(clones);
    kept.extend(children);
    let before = kept.len();
    kept.retain(|(_, g)| !(g.opacity() < cfg.min_opacity));
    let pruned = before - kept.len();
    let (origins, gaussians): (Vec<_>, Vec<_>) = kept.into_iter().unzip();
    cloud.replace(gaussians);
    DensifyOutcome {
        origins,
        cloned,
        split,
        pruned,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(pos: [f64; 3], scale: f64, opacity: f64) -> Gaussian {
        Gaussian::new(Vector3::from(pos), Vector3::repeat(scale), opacity, Vector3::repeat(0.5))
    }

    #[test]
    fn zero_gradients_only_prune() {
        let mut cloud = GaussianCloud::new(vec![g([0.0; 3], 0.1, 0.5), g([1.0, 0.0, 0.0], 0.1, 0.001)]);
        let before = cloud.gaussians[0].clone();
        let out = clone_split_prune(&mut cloud, &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.gaussians[0], before);
        assert_eq!(out.pruned, 1);
        assert_eq!(out.origins, vec![Some(0)]);
    }

    #[test]
    fn large_gaussian_splits() {
        let mut cloud = GaussianCloud::new(vec![g([0.0; 3], 0.5, 0.5)]);
        cloud.record_gradient(0, 1.0);
        let out = clone_split_prune(&mut cloud, &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(cloud.len(), 2);
        assert_eq!(out.split, 1);
        for c in &cloud.gaussians {
            assert!((c.scales() - Vector3::repeat(0.5 / 1.6)).norm() < 1e-12);
        }
        assert_eq!(cloud.mean_gradient(0), 0.0);
    }

    #[test]
    fn small_gaussian_clones() {
        let mut cloud = GaussianCloud::new(vec![g([0.0; 3], 0.001, 0.5), g([1.0; 3], 0.001, 0.5)]);
        cloud.record_gradient(1, 1.0);
        let out = clone_split_prune(&mut cloud, &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(cloud.len(), 3);
        assert_eq!(out.cloned, 1);
        assert_eq!(out.origins, vec![Some(0), Some(1), None]);
        assert_eq!(cloud.gaussians[1], cloud.gaussians[2]);
    }

    fn maps(w: usize, h: usize, depth: f64) -> PropagatedMaps {
        PropagatedMaps {
            depth: Grid::new(w, h, depth),
            normal: Grid::new(w, h, -Vector3::z()),
            score: Grid::new(w, h, 1.0),
            valid: Grid::new(w, h, true),
        }
    }

    fn rendered(w: usize, h: usize, depth: f64, alpha: f64) -> GeoMaps {
        let mut r = GeoMaps::empty(w, h);
        r.depth.data.iter_mut().for_each(|v| *v = depth);
        r.alpha.data.iter_mut().for_each(|v| *v = alpha);
        r
    }

    #[test]
    fn growth_mask_examples() {
        let f = maps(4, 3, 10.0);
        assert!(select_growth_pixels(&f, &rendered(4, 3, 10.0, 1.0), 0.8).unwrap().data.iter().all(|v| !v));
        assert!(select_growth_pixels(&f, &rendered(4, 3, 0.0, 0.0), 0.8).unwrap().data.iter().all(|v| *v));
        assert!(select_growth_pixels(&f, &rendered(4, 3, 5.0, 1.0), 0.8).unwrap().data.iter().all(|v| !v));
        assert!(select_growth_pixels(&f, &rendered(4, 3, 1.0, 1.0), 0.8).unwrap().data.iter().all(|v| *v));
    }

    fn view(w: usize, h: usize) -> CameraView {
        let k = Intrinsics::new(50.0, 50.0, (w / 2) as f64, (h / 2) as f64, w, h).unwrap();
        CameraView {
            id: 1,
            name: "v".into(),
            camera: Camera::new(k, Pose::identity()),
            image: Grid::new(w, h, Vector3::new(0.2, 0.4, 0.6)),
            gt_depth: None,
            gt_normal: None,
        }
    }

    #[test]
    fn spawn_at_principal_point() {
        let v = view(8, 4);
        let mut mask = Grid::new(8, 4, false);
        *mask.get_mut(4, 2) = true;
        let f = maps(8, 4, 2.0);
        let mut cloud = GaussianCloud::default();
        let added = spawn_gaussians(&mask, &f, &v, &mut cloud, &SpawnConfig::default()).unwrap();
        assert_eq!(added, 1);
        let s = &cloud.gaussians[0];
        assert!((s.position - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert!((s.opacity() - 0.1).abs() < 1e-12);
        assert_eq!(s.color, Vector3::new(0.2, 0.4, 0.6));
        assert!((s.shortest_axis_normal(&Vector3::zeros()) + Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn spawn_counts_subsampled_mask() {
        let v = view(9, 7);
        let mask = Grid::from_fn(9, 7, |x, y| (x + y) % 3 != 0);
        let expected = (0..7).step_by(2).flat_map(|y| (0..9).step_by(2).map(move |x| (x, y))).filter(|&(x, y)| (x + y) % 3 != 0).count();
        let mut cloud = GaussianCloud::new(vec![g([0.0, 0.0, 5.0], 0.1, 0.5)]);
        let added = spawn_gaussians(&mask, &maps(9, 7, 3.0), &v, &mut cloud, &SpawnConfig::default()).unwrap();
        assert_eq!(added, expected);
        assert_eq!(cloud.len(), expected + 1);
        let empty = Grid::new(9, 7, false);
        assert_eq!(spawn_gaussians(&empty, &maps(9, 7, 3.0), &v, &mut cloud, &SpawnConfig::default()).unwrap(), 0);
    }

    #[test]
    fn single_view_filter_invalidates_everything() {
        let v = view(8, 6);
        let out = geometric_filter(&[v.camera], &[maps(8, 6, 2.0)], &FilterConfig::default()).unwrap();
        assert_eq!(out[0].valid_count(), 0);
    }
}
