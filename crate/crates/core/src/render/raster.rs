use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::Vector3;
use rayon::prelude::*;

use super::project::{project_to_2d, Projected2DGaussian};
use super::{GeoMaps, ALPHA_EPS, ALPHA_MAX, SUPPORT_RADIUS2, TRANSMITTANCE_MIN};
use crate::camera::Camera;
use crate::gaussian::GaussianCloud;

pub const TILE_SIZE: usize = 16;

/// One Gaussian's contribution at one pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    /// Position in the tile list.
    pub slot: u32,
    pub alpha: f64,
    /// Transmittance before this Gaussian.
    pub transmittance: f64,
    /// Unclamped Gaussian falloff `exp(-0.5 m^2)`.
    pub falloff: f64,
    pub clamped: bool,
}

/// Projected Gaussians binned into screen tiles, ready for forward and
/// backward passes over one camera.
pub struct Frame {
    pub(crate) camera: Camera,
    pub(crate) projected: Vec<Option<Projected2DGaussian>>,
    /// Per tile, Gaussian indices sorted by (depth, index).
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) tiles_x: usize,
}

impl Frame {
    pub fn prepare(camera: &Camera, cloud: &GaussianCloud) -> Frame {
        let (w, h) = (camera.width(), camera.height());
        let tiles_x = w.div_ceil(TILE_SIZE);
        let tiles_y = h.div_ceil(TILE_SIZE);
        let projected: Vec<Option<Projected2DGaussian>> =
            cloud.gaussians.par_iter().map(|g| project_to_2d(g, camera)).collect();

        let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
        let ts = TILE_SIZE as f64;
        for (i, p) in projected.iter().enumerate() {
            let Some(p) = p else { continue };
            let rx = (SUPPORT_RADIUS2 * p.cov2[(0, 0)]).sqrt();
            let ry = (SUPPORT_RADIUS2 * p.cov2[(1, 1)]).sqrt();
            let (x0, x1) = (p.mean2.x - rx, p.mean2.x + rx);
            let (y0, y1) = (p.mean2.y - ry, p.mean2.y + ry);
            if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 {
                continue;
            }
            let tx0 = (x0 / ts).floor().max(0.0) as usize;
            let ty0 = (y0 / ts).floor().max(0.0) as usize;
            let tx1 = ((x1 / ts).floor() as usize).min(tiles_x - 1);
            let ty1 = ((y1 / ts).floor() as usize).min(tiles_y - 1);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tiles[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        tiles.par_iter_mut().for_each(|list| {
            list.sort_by(|&a, &b| {
                let da = projected[a as usize].as_ref().map_or(0.0, |p| p.depth);
                let db = projected[b as usize].as_ref().map_or(0.0, |p| p.depth);
                da.total_cmp(&db).then(a.cmp(&b))
            });
        });
        Frame {
            camera: *camera,
            projected,
            tiles,
            tiles_x,
        }
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    /// Whether Gaussian `i` was projected and binned into at least one tile.
    pub fn visible(&self) -> Vec<bool> {
        let mut v = vec![false; self.projected.len()];
        for list in &self.tiles {
            for &i in list {
                v[i as usize] = true;
            }
        }
        v
    }

    pub fn projected(&self, i: usize) -> Option<&Projected2DGaussian> {
        self.projected[i].as_ref()
    }

    pub(crate) fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(self.camera.width());
        let y1 = (y0 + TILE_SIZE).min(self.camera.height());
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    /// Front-to-back walk over the contributors of pixel `(x, y)` from the
    /// tile list `list`. Returns the final transmittance.
    pub(crate) fn blend_pixel(&self, list: &[u32], x: usize, y: usize, mut visit: impl FnMut(u32, &Contribution)) -> f64 {
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        for (slot, &gi) in list.iter().enumerate() {
            if t < TRANSMITTANCE_MIN {
                break;
            }
            let p = self.projected[gi as usize].as_ref().expect("binned Gaussians are projected");
            let dx = px - p.mean2.x;
            let dy = py - p.mean2.y;
            let c = &p.conic;
            let m2 = c[(0, 0)] * dx * dx + (c[(0, 1)] + c[(1, 0)]) * dx * dy + c[(1, 1)] * dy * dy;
            if !(m2 <= SUPPORT_RADIUS2) {
                continue;
            }
            let falloff = (-0.5 * m2).exp();
            let raw = p.opacity * falloff;
            let (alpha, clamped) = if raw > ALPHA_MAX { (ALPHA_MAX, true) } else { (raw, false) };
            visit(
                gi,
                &Contribution {
                    slot: slot as u32,
                    alpha,
                    transmittance: t,
                    falloff,
                    clamped,
                },
            );
            t *= 1.0 - alpha;
        }
        t
    }

    pub fn forward(&self) -> GeoMaps {
        let (w, h) = (self.camera.width(), self.camera.height());
        let tile_out: Vec<Vec<(usize, Vector3<f64>, f64, Vector3<f64>, f64)>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let list = &self.tiles[tile];
                self.tile_pixels(tile)
                    .map(|(x, y)| {
                        let mut color = Vector3::zeros();
                        let mut depth = 0.0;
                        let mut normal = Vector3::zeros();
                        let mut acc = 0.0;
                        self.blend_pixel(list, x, y, |gi, c| {
                            let p = self.projected[gi as usize].as_ref().unwrap();
                            let wgt = c.alpha * c.transmittance;
                            color += p.color * wgt;
                            depth += p.depth * wgt;
                            normal += p.normal * wgt;
                            acc += wgt;
                        });
                        let (depth, normal) = finish_geometry(depth, normal, acc);
                        (y * w + x, color, depth, normal, acc)
                    })
                    .collect()
            })
            .collect();
        let mut maps = GeoMaps::empty(w, h);
        for out in tile_out {
            for (i, color, depth, normal, acc) in out {
                maps.color.data[i] = color;
                maps.depth.data[i] = depth;
                maps.normal.data[i] = normal;
                maps.alpha.data[i] = acc;
            }
        }
        maps
    }

    /// Hash of every discrete decision the forward pass makes: which
    /// Gaussians contribute to which pixel, alpha clamping, normalisation
    /// branches, shortest-axis choice and normal orientation. Two parameter
    /// sets with equal signatures lie on the same smooth piece of the
    /// renderer.
    pub fn branch_signature(&self, cloud: &GaussianCloud) -> u64 {
        let mut hasher = DefaultHasher::new();
        for (i, p) in self.projected.iter().enumerate() {
            p.is_some().hash(&mut hasher);
            if let Some(p) = p {
                let g = &cloud.gaussians[i];
                let axis = g.shortest_axis();
                axis.hash(&mut hasher);
                let col: Vector3<f64> = self.camera.pose.rotation * g.rotation_matrix().column(axis);
                (col.dot(&p.normal) > 0.0).hash(&mut hasher);
            }
        }
        for tile in 0..self.tiles.len() {
            let list = &self.tiles[tile];
            for (x, y) in self.tile_pixels(tile) {
                let mut normal = Vector3::zeros();
                let mut acc = 0.0;
                self.blend_pixel(list, x, y, |gi, c| {
                    gi.hash(&mut hasher);
                    c.clamped.hash(&mut hasher);
                    let wgt = c.alpha * c.transmittance;
                    normal += self.projected[gi as usize].as_ref().unwrap().normal * wgt;
                    acc += wgt;
                });
                u32::MAX.hash(&mut hasher);
                (acc > ALPHA_EPS).hash(&mut hasher);
                (normal.norm() > 1e-12).hash(&mut hasher);
            }
        }
        hasher.finish()
    }
}

/// Alpha-normalised depth and unit normal from the raw blended sums.
#[inline]
pub(crate) fn finish_geometry(depth: f64, normal: Vector3<f64>, acc: f64) -> (f64, Vector3<f64>) {
    if acc > ALPHA_EPS {
        let len = normal.norm();
        let n = if len > 1e-12 { normal / len } else { Vector3::zeros() };
        (depth / acc, n)
    } else {
        (0.0, Vector3::zeros())
    }
}
