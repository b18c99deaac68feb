//! Reverse mode of the rasterizer.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::project::{project_to_2d_backward, GaussianGrad, ProjectedGrad};
use super::raster::{Contribution, Frame};
use super::ALPHA_EPS;
use crate::gaussian::GaussianCloud;
use crate::grid::Grid;

/// Loss gradients with respect to each output map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradients {
    pub color: Grid<Vector3<f64>>,
    pub depth: Grid<f64>,
    pub normal: Grid<Vector3<f64>>,
    pub alpha: Grid<f64>,
}

impl MapGradients {
    pub fn zeros(width: usize, height: usize) -> Self {
        MapGradients {
            color: Grid::new(width, height, Vector3::zeros()),
            depth: Grid::new(width, height, 0.0),
            normal: Grid::new(width, height, Vector3::zeros()),
            alpha: Grid::new(width, height, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub gaussians: Vec<GaussianGrad>,
    /// Gradient on each projected centre, in pixels.
    pub mean2: Vec<Vector2<f64>>,
    /// Projected and binned into at least one tile.
    pub visible: Vec<bool>,
}

impl CloudGradients {
    /// Norms of the screen-space centre gradients in normalised device
    /// units (`[-1, 1]` across the image).
    pub fn ndc_norms(&self, width: usize, height: usize) -> Vec<f64> {
        let (sx, sy) = (width as f64 * 0.5, height as f64 * 0.5);
        self.mean2.iter().map(|g| Vector2::new(g.x * sx, g.y * sy).norm()).collect()
    }
}

impl Frame {
    pub fn backward(&self, cloud: &GaussianCloud, upstream: &MapGradients) -> CloudGradients {
        let width = self.camera.width();
        let per_tile: Vec<Vec<ProjectedGrad>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| self.backward_tile(tile, upstream, width))
            .collect();

        let n = cloud.len();
        let mut projected_grads = vec![ProjectedGrad::default(); n];
        for (tile, grads) in per_tile.iter().enumerate() {
            for (slot, g) in grads.iter().enumerate() {
                projected_grads[self.tiles[tile][slot] as usize].accumulate(g);
            }
        }
        let gaussians: Vec<GaussianGrad> = cloud
            .gaussians
            .par_iter()
            .zip(projected_grads.par_iter())
            .map(|(g, up)| {
                if *up == ProjectedGrad::default() {
                    GaussianGrad::default()
                } else {
                    project_to_2d_backward(g, &self.camera, up)
                }
            })
            .collect();
        CloudGradients {
            gaussians,
            mean2: projected_grads.iter().map(|g| g.mean2).collect(),
            visible: self.visible(),
        }
    }

    fn backward_tile(&self, tile: usize, upstream: &MapGradients, width: usize) -> Vec<ProjectedGrad> {
        let list = &self.tiles[tile];
        let mut grads = vec![ProjectedGrad::default(); list.len()];
        let mut contribs: Vec<(u32, Contribution)> = Vec::new();
        for (x, y) in self.tile_pixels(tile) {
            let i = y * width + x;
            contribs.clear();
            let mut depth = 0.0;
            let mut normal = Vector3::zeros();
            let mut acc = 0.0;
            self.blend_pixel(list, x, y, |gi, c| {
                let p = self.projected[gi as usize].as_ref().unwrap();
                let wgt = c.alpha * c.transmittance;
                depth += p.depth * wgt;
                normal += p.normal * wgt;
                acc += wgt;
                contribs.push((gi, *c));
            });
            if contribs.is_empty() {
                continue;
            }

            let g_color = upstream.color.data[i];
            let mut g_acc = upstream.alpha.data[i];
            let mut g_depth = 0.0;
            let mut g_normal = Vector3::zeros();
            if acc > ALPHA_EPS {
                let g_out_depth = upstream.depth.data[i];
                g_depth = g_out_depth / acc;
                g_acc -= g_out_depth * depth / (acc * acc);
                let len = normal.norm();
                if len > 1e-12 {
                    let nh = normal / len;
                    let gn = upstream.normal.data[i];
                    g_normal = (gn - nh * nh.dot(&gn)) / len;
                }
            }

            let (px, py) = (x as f64, y as f64);
            let mut suffix = 0.0;
            for (gi, c) in contribs.iter().rev() {
                let p = self.projected[*gi as usize].as_ref().unwrap();
                let f = g_color.dot(&p.color) + g_depth * p.depth + g_normal.dot(&p.normal) + g_acc;
                let wgt = c.alpha * c.transmittance;
                let out = &mut grads[c.slot as usize];
                out.color += g_color * wgt;
                out.depth += g_depth * wgt;
                out.normal += g_normal * wgt;

                let d_alpha = c.transmittance * f - suffix / (1.0 - c.alpha);
                suffix += f * wgt;
                if c.clamped {
                    continue;
                }
                out.opacity += d_alpha * c.falloff;
                // alpha = o exp(-m2 / 2)
                let d_m2 = -0.5 * d_alpha * p.opacity * c.falloff;
                let delta = Vector2::new(px - p.mean2.x, py - p.mean2.y);
                let cc = p.conic + p.conic.transpose();
                out.mean2 -= cc * delta * d_m2;
                out.conic += Matrix2::new(
                    delta.x * delta.x,
                    delta.x * delta.y,
                    delta.y * delta.x,
                    delta.y * delta.y,
                ) * d_m2;
            }
        }
        grads
    }
}
