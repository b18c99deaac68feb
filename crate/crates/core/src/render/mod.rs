//! Tile-based splatting of Gaussians into color, depth, normal and alpha maps.
//!
//! Every pixel blends the Gaussians whose 3-sigma ellipse contains it, sorted
//! by camera depth, front to back. Depth and normals are blended exactly like
//! color; depth is then divided by the accumulated alpha and normals are
//! renormalised wherever the accumulated alpha exceeds [`ALPHA_EPS`].

mod backward;
mod project;
mod raster;

pub use backward::{CloudGradients, MapGradients};
pub use project::{
    project_to_2d, project_to_2d_backward, GaussianGrad, ProjectedGrad, Projected2DGaussian, COV_DILATION,
    NEAR_PLANE,
};
pub use raster::{Frame, TILE_SIZE};

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::gaussian::GaussianCloud;
use crate::grid::Grid;

pub const ALPHA_MAX: f64 = 0.99;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Accumulated alpha above which depth and normal are normalised.
pub const ALPHA_EPS: f64 = 1e-3;
/// Squared Mahalanobis radius of the support ellipse (3 sigma).
pub const SUPPORT_RADIUS2: f64 = 9.0;

/// Rendered per-view buffers. Normals are in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoMaps {
    pub color: Grid<Vector3<f64>>,
    pub depth: Grid<f64>,
    pub normal: Grid<Vector3<f64>>,
    pub alpha: Grid<f64>,
}

impl GeoMaps {
    pub fn empty(width: usize, height: usize) -> Self {
        GeoMaps {
            color: Grid::new(width, height, Vector3::zeros()),
            depth: Grid::new(width, height, 0.0),
            normal: Grid::new(width, height, Vector3::zeros()),
            alpha: Grid::new(width, height, 0.0),
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }
}

pub fn render(camera: &Camera, cloud: &GaussianCloud) -> GeoMaps {
    Frame::prepare(camera, cloud).forward()
}

pub fn render_backward(camera: &Camera, cloud: &GaussianCloud, upstream: &MapGradients) -> CloudGradients {
    Frame::prepare(camera, cloud).backward(cloud, upstream)
}
