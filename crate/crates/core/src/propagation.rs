//! Checkerboard PatchMatch over per-pixel plane hypotheses.
//!
//! Rendered depth and normal maps are turned into local planes, then every
//! pixel repeatedly tries the planes of its four nearest neighbours and keeps
//! whichever best explains the neighbouring views photometrically (NCC over a
//! plane-warped patch). Red and black pixels alternate so that each half
//! reads only the other half while updating.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{relative_transform, warp_pixel, Camera, PlaneHypothesis};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::render::{GeoMaps, ALPHA_EPS};

/// Below this |n . ray| a plane is parallel to the viewing ray.
const GRAZING_EPS: f64 = 1e-9;
/// Largest fraction of patch samples that may fall outside either image.
const MAX_OUT_OF_BOUNDS: f64 = 0.3;
const MIN_PATCH_VARIANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    /// Patch half-size; the patch is `(2r + 1)^2`.
    pub patch_radius: usize,
    /// Number of red/black sweeps.
    pub iterations: usize,
    /// Pixels whose best aggregated score is below this are invalid.
    pub ncc_min: f64,
    /// Neighbouring views used for matching.
    pub num_neighbor_views: usize,
    /// Per-view scores averaged into the aggregate (best first).
    pub top_k_views: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            patch_radius: 5,
            iterations: 3,
            ncc_min: 0.1,
            num_neighbor_views: 3,
            top_k_views: 3,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 2 {
            return Err(Error::InvalidConfig(format!("patch_radius must be >= 2, got {}", self.patch_radius)));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("propagation needs at least one iteration".into()));
        }
        if self.top_k_views < 1 || self.num_neighbor_views < 1 {
            return Err(Error::InvalidConfig("need at least one neighbour view".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// `(x + y)` even.
    Red,
    Black,
}

impl Phase {
    pub fn of(x: usize, y: usize) -> Phase {
        if (x + y) % 2 == 0 {
            Phase::Red
        } else {
            Phase::Black
        }
    }
}

/// Plane through the back-projection of `pixel`: `d = -z n^T K^-1 p~`. The normal is
/// flipped first if it faces away from the camera. `None` for grazing planes
/// or non-positive depth.
pub fn plane_from_pixel(
    pixel: Vector2<f64>,
    depth: f64,
    normal: &Vector3<f64>,
    k: &crate::camera::Intrinsics,
) -> Option<PlaneHypothesis> {
    if !(depth > 0.0) || !depth.is_finite() {
        return None;
    }
    let len = normal.norm();
    if !(len > 0.0) || !len.is_finite() {
        return None;
    }
    let mut n = normal / len;
    let ray = k.ray(pixel);
    let mut dot = n.dot(&ray);
    if dot.abs() < GRAZING_EPS {
        return None;
    }
    if dot > 0.0 {
        n = -n;
        dot = -dot;
    }
    Some(PlaneHypothesis {
        normal: n,
        distance: -depth * dot,
    })
}

/// Depth of `plane` at `pixel` and its normal.
pub fn depth_normal_from_plane(
    pixel: Vector2<f64>,
    plane: &PlaneHypothesis,
    k: &crate::camera::Intrinsics,
) -> Option<(f64, Vector3<f64>)> {
    plane.depth_along(&k.ray(pixel)).map(|z| (z, plane.normal))
}

/// The pixel's own hypothesis (if any) followed by the valid hypotheses of
/// its up/down/left/right neighbours.
pub fn candidate_set(x: usize, y: usize, grid: &Grid<Option<PlaneHypothesis>>) -> Vec<PlaneHypothesis> {
    let mut out = Vec::with_capacity(5);
    if let Some(h) = grid.get(x, y) {
        out.push(*h);
    }
    let (xi, yi) = (x as i64, y as i64);
    for (dx, dy) in [(0, -1), (0, 1), (-1, 0), (1, 0)] {
        let (nx, ny) = (xi + dx, yi + dy);
        if grid.contains(nx, ny) {
            if let Some(h) = grid.get(nx as usize, ny as usize) {
                out.push(*h);
            }
        }
    }
    out
}

/// Luma of a linear RGB image.
pub fn grayscale(image: &Grid<Vector3<f64>>) -> Grid<f64> {
    image.map(|c| 0.299 * c.x + 0.587 * c.y + 0.114 * c.z)
}

/// A posed grayscale image used for matching.
#[derive(Debug, Clone)]
pub struct MatchView {
    pub camera: Camera,
    pub gray: Grid<f64>,
}

impl MatchView {
    pub fn new(camera: Camera, image: &Grid<Vector3<f64>>) -> Self {
        MatchView {
            camera,
            gray: grayscale(image),
        }
    }
}

/// Reference-to-source warp factors: `H = A - b (K_ref^-T n)^T / d`.
struct WarpBasis {
    a: Matrix3<f64>,
    b: Vector3<f64>,
    k_ref_inv_t: Matrix3<f64>,
}

impl WarpBasis {
    fn new(reference: &Camera, source: &Camera) -> Self {
        let rel = relative_transform(&reference.pose, &source.pose);
        let k_src = source.intrinsics.matrix();
        let k_ref_inv = reference.intrinsics.inverse_matrix();
        WarpBasis {
            a: k_src * rel.rotation * k_ref_inv,
            b: k_src * rel.translation,
            k_ref_inv_t: k_ref_inv.transpose(),
        }
    }

    #[inline]
    fn homography(&self, plane: &PlaneHypothesis) -> Matrix3<f64> {
        let m = self.k_ref_inv_t * plane.normal / plane.distance;
        self.a - self.b * m.transpose()
    }
}

fn ncc_with_homography(reference: &Grid<f64>, source: &Grid<f64>, x: usize, y: usize, h: &Matrix3<f64>, radius: usize) -> f64 {
    let r = radius as i64;
    let total = ((2 * r + 1) * (2 * r + 1)) as usize;
    let max_oob = (MAX_OUT_OF_BOUNDS * total as f64).floor() as usize;
    let mut oob = 0usize;
    let (mut n, mut sr, mut ss, mut srr, mut sss, mut srs) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -r..=r {
        for dx in -r..=r {
            let (qx, qy) = (x as i64 + dx, y as i64 + dy);
            let sample = if reference.contains(qx, qy) {
                warp_pixel(h, Vector2::new(qx as f64, qy as f64))
                    .and_then(|w| source.sample_bilinear(w.x, w.y))
                    .map(|s| (*reference.get(qx as usize, qy as usize), s))
            } else {
                None
            };
            match sample {
                Some((a, b)) => {
                    n += 1.0;
                    sr += a;
                    ss += b;
                    srr += a * a;
                    sss += b * b;
                    srs += a * b;
                }
                None => {
                    oob += 1;
                    if oob > max_oob {
                        return -1.0;
                    }
                }
            }
        }
    }
    let mr = sr / n;
    let ms = ss / n;
    let vr = srr / n - mr * mr;
    let vs = sss / n - ms * ms;
    if vr < MIN_PATCH_VARIANCE || vs < MIN_PATCH_VARIANCE {
        return -1.0;
    }
    let cov = srs / n - mr * ms;
    (cov / (vr * vs).sqrt()).clamp(-1.0, 1.0)
}

/// Zero-mean NCC between the patch around `pixel` in `reference` and its
/// warp into `source` through `plane`. `-1` for invalid warps, patches with
/// more than 30% of samples outside either image, or flat patches.
pub fn ncc_score(reference: &MatchView, source: &MatchView, pixel: (usize, usize), plane: &PlaneHypothesis, radius: usize) -> f64 {
    if !(plane.distance > 0.0) {
        return -1.0;
    }
    let basis = WarpBasis::new(&reference.camera, &source.camera);
    let h = basis.homography(plane);
    ncc_with_homography(&reference.gray, &source.gray, pixel.0, pixel.1, &h, radius)
}

/// Indices of the `count` views whose centres are closest to view `index`,
/// nearest first, ties by index.
pub fn nearest_views(cameras: &[Camera], index: usize, count: usize) -> Vec<usize> {
    let c = cameras[index].center();
    let mut others: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != index)
        .map(|(i, cam)| ((cam.center() - c).norm(), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Propagated per-pixel geometry for one view. Normals are camera-frame and
/// camera-facing; invalid pixels carry depth 0 and a zero normal.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedMaps {
    pub depth: Grid<f64>,
    pub normal: Grid<Vector3<f64>>,
    pub score: Grid<f64>,
    pub valid: Grid<bool>,
}

impl PropagatedMaps {
    pub fn invalid(width: usize, height: usize) -> Self {
        PropagatedMaps {
            depth: Grid::new(width, height, 0.0),
            normal: Grid::new(width, height, Vector3::zeros()),
            score: Grid::new(width, height, -1.0),
            valid: Grid::new(width, height, false),
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data.iter().filter(|v| **v).count()
    }

    pub fn invalidate(&mut self, i: usize) {
        self.valid.data[i] = false;
        self.depth.data[i] = 0.0;
        self.normal.data[i] = Vector3::zeros();
    }
}

struct Matcher<'a> {
    reference: &'a MatchView,
    sources: Vec<(&'a Grid<f64>, WarpBasis)>,
    radius: usize,
    top_k: usize,
}

impl Matcher<'_> {
    fn score(&self, x: usize, y: usize, plane: &PlaneHypothesis, scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        for (gray, basis) in &self.sources {
            let h = basis.homography(plane);
            scratch.push(ncc_with_homography(&self.reference.gray, gray, x, y, &h, self.radius));
        }
        scratch.sort_by(|a, b| b.total_cmp(a));
        let k = self.top_k.min(scratch.len());
        scratch[..k].iter().sum::<f64>() / k as f64
    }
}

/// Runs `cfg.iterations` red/black sweeps starting from the rendered maps.
///
/// Pixels with rendered alpha at or below [`ALPHA_EPS`] start without a
/// hypothesis and can only acquire one from a neighbour.
pub fn propagate(reference: &MatchView, neighbors: &[MatchView], rendered: &GeoMaps, cfg: &PropagationConfig) -> Result<PropagatedMaps> {
    cfg.validate()?;
    let k = reference.camera.intrinsics;
    let (w, h) = (k.width, k.height);
    if rendered.width() != w || rendered.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "rendered maps {}x{} vs camera {}x{}",
            rendered.width(),
            rendered.height(),
            w,
            h
        )));
    }
    if neighbors.is_empty() {
        return Ok(PropagatedMaps::invalid(w, h));
    }
    let matcher = Matcher {
        reference,
        sources: neighbors
            .iter()
            .take(cfg.num_neighbor_views)
            .map(|v| (&v.gray, WarpBasis::new(&reference.camera, &v.camera)))
            .collect(),
        radius: cfg.patch_radius,
        top_k: cfg.top_k_views,
    };

    let mut hyps: Grid<Option<PlaneHypothesis>> = Grid::from_fn(w, h, |x, y| {
        let i = y * w + x;
        if rendered.alpha.data[i] > ALPHA_EPS {
            plane_from_pixel(Vector2::new(x as f64, y as f64), rendered.depth.data[i], &rendered.normal.data[i], &k)
        } else {
            None
        }
    });
    let mut scores: Grid<f64> = Grid::from_vec(
        w,
        h,
        (0..h)
            .into_par_iter()
            .flat_map_iter(|y| {
                let hyps = &hyps;
                let matcher = &matcher;
                let mut scratch = Vec::new();
                (0..w)
                    .map(move |x| match hyps.get(x, y) {
                        Some(p) => matcher.score(x, y, p, &mut scratch),
                        None => f64::NEG_INFINITY,
                    })
                    .collect::<Vec<_>>()
            })
            .collect(),
    );

    for _ in 0..cfg.iterations {
        for phase in [Phase::Red, Phase::Black] {
            let updates: Vec<(usize, PlaneHypothesis, f64)> = (0..h)
                .into_par_iter()
                .flat_map_iter(|y| {
                    let hyps = &hyps;
                    let scores = &scores;
                    let matcher = &matcher;
                    let mut scratch = Vec::new();
                    let start = match (phase, y % 2) {
                        (Phase::Red, 0) | (Phase::Black, 1) => 0,
                        _ => 1,
                    };
                    (start..w)
                        .step_by(2)
                        .filter_map(move |x| {
                            let i = y * w + x;
                            let ray = k.ray(Vector2::new(x as f64, y as f64));
                            let own = *hyps.get(x, y);
                            let mut best: Option<(PlaneHypothesis, f64)> = None;
                            let mut best_score = scores.data[i];
                            for cand in candidate_set(x, y, hyps) {
                                if Some(cand) == own {
                                    continue;
                                }
                                if cand.depth_along(&ray).is_none() {
                                    continue;
                                }
                                let s = matcher.score(x, y, &cand, &mut scratch);
                                if s > best_score {
                                    best_score = s;
                                    best = Some((cand, s));
                                }
                            }
                            best.map(|(p, s)| (i, p, s))
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            for (i, p, s) in updates {
                hyps.data[i] = Some(p);
                scores.data[i] = s;
            }
        }
    }

    let mut out = PropagatedMaps::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.score.data[i] = scores.data[i].max(-1.0);
            let Some(p) = hyps.data[i] else { continue };
            if scores.data[i] < cfg.ncc_min {
                continue;
            }
            if let Some((z, n)) = depth_normal_from_plane(Vector2::new(x as f64, y as f64), &p, &k) {
                out.depth.data[i] = z;
                out.normal.data[i] = n;
                out.valid.data[i] = true;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80).unwrap()
    }

    #[test]
    fn plane_at_principal_point() {
        let p = plane_from_pixel(Vector2::new(50.0, 40.0), 2.0, &Vector3::z(), &k()).unwrap();
        assert_eq!(p.distance, 2.0);
        assert_eq!(p.normal, -Vector3::z());
        let p = plane_from_pixel(Vector2::new(50.0, 40.0), 2.0, &-Vector3::z(), &k()).unwrap();
        assert_eq!(p.distance, 2.0);
    }

    #[test]
    fn grazing_plane_is_invalid() {
        // ray at the principal point is +z; x-normal is parallel to it
        assert!(plane_from_pixel(Vector2::new(50.0, 40.0), 2.0, &Vector3::x(), &k()).is_none());
        assert!(plane_from_pixel(Vector2::new(50.0, 40.0), 0.0, &Vector3::z(), &k()).is_none());
    }

    #[test]
    fn fronto_parallel_depth_everywhere() {
        let plane = PlaneHypothesis::new(-Vector3::z(), 4.0).unwrap();
        for (x, y) in [(0.0, 0.0), (99.0, 79.0), (13.0, 61.0)] {
            let (z, n) = depth_normal_from_plane(Vector2::new(x, y), &plane, &k()).unwrap();
            assert!((z - 4.0).abs() < 1e-12);
            assert_eq!(n, plane.normal);
        }
        // a plane facing away never yields a positive depth
        let away = PlaneHypothesis::new(Vector3::z(), 4.0).unwrap();
        assert!(depth_normal_from_plane(Vector2::new(50.0, 40.0), &away, &k()).is_none());
    }

    #[test]
    fn tilted_plane_matches_ray_intersection() {
        let n = Vector3::new(0.2, -0.5, -1.0).normalize();
        let plane = PlaneHypothesis::new(n, 3.0).unwrap();
        let k = k();
        for x in 0..100 {
            let p = Vector2::new(x as f64, 17.0);
            let ray = k.ray(p);
            // oracle: solve n.(t ray) + d = 0 for t
            let t = -3.0 / n.dot(&ray);
            let (z, _) = depth_normal_from_plane(p, &plane, &k).unwrap();
            assert!((z - t * ray.z).abs() < 1e-9);
        }
    }

    #[test]
    fn candidate_counts() {
        let plane = PlaneHypothesis::new(-Vector3::z(), 1.0).unwrap();
        let full = Grid::new(5, 4, Some(plane));
        assert_eq!(candidate_set(2, 2, &full).len(), 5);
        assert_eq!(candidate_set(0, 0, &full).len(), 3);
        assert_eq!(candidate_set(4, 1, &full).len(), 4);
        let mut lonely: Grid<Option<PlaneHypothesis>> = Grid::new(5, 4, None);
        *lonely.get_mut(2, 2) = Some(plane);
        assert_eq!(candidate_set(2, 2, &lonely).len(), 1);
        assert_eq!(candidate_set(2, 1, &lonely).len(), 1);
    }

    #[test]
    fn phases_partition_neighbours() {
        assert_eq!(Phase::of(0, 0), Phase::Red);
        assert_eq!(Phase::of(1, 0), Phase::Black);
        assert_eq!(Phase::of(3, 5), Phase::Red);
    }

    fn textured(w: usize, h: usize, sign: f64) -> Grid<Vector3<f64>> {
        Grid::from_fn(w, h, |x, y| {
            let v = 0.5 + sign * 0.4 * ((x as f64 * 0.7).sin() * (y as f64 * 0.45 + 0.3).cos());
            Vector3::repeat(v)
        })
    }

    #[test]
    fn ncc_self_and_negated() {
        let cam = Camera::new(k(), Pose::identity());
        let a = MatchView::new(cam, &textured(100, 80, 1.0));
        let b = MatchView::new(cam, &textured(100, 80, -1.0));
        let plane = PlaneHypothesis::new(-Vector3::z(), 3.0).unwrap();
        assert!((ncc_score(&a, &a, (40, 30), &plane, 5) - 1.0).abs() < 1e-9);
        assert!((ncc_score(&a, &b, (40, 30), &plane, 5) + 1.0).abs() < 1e-9);
        // flat image has no variance
        let flat = MatchView::new(cam, &Grid::new(100, 80, Vector3::repeat(0.3)));
        assert_eq!(ncc_score(&flat, &flat, (40, 30), &plane, 5), -1.0);
        // patch hanging off the image corner
        assert_eq!(ncc_score(&a, &a, (0, 0), &plane, 5), -1.0);
    }

    #[test]
    fn no_neighbours_gives_all_invalid() {
        let cam = Camera::new(k(), Pose::identity());
        let a = MatchView::new(cam, &textured(100, 80, 1.0));
        let mut maps = GeoMaps::empty(100, 80);
        maps.alpha.data.iter_mut().for_each(|v| *v = 1.0);
        maps.depth.data.iter_mut().for_each(|v| *v = 2.0);
        maps.normal.data.iter_mut().for_each(|v| *v = -Vector3::z());
        let out = propagate(&a, &[], &maps, &PropagationConfig::default()).unwrap();
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn config_rejects_zero_iterations() {
        let cfg = PropagationConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PropagationConfig {
            patch_radius: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nearest_views_by_centre_distance() {
        let kk = k();
        let cams: Vec<Camera> = [0.0, 3.0, 1.0, -0.5]
            .iter()
            .map(|&x| Camera::new(kk, Pose::new(Matrix3::identity(), Vector3::new(-x, 0.0, 0.0)).unwrap()))
            .collect();
        assert_eq!(nearest_views(&cams, 0, 2), vec![3, 2]);
        assert_eq!(nearest_views(&cams, 1, 5), vec![2, 0, 3]);
    }
}
