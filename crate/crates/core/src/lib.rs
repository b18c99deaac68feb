//! CPU Gaussian splatting with plane-propagation guided densification.
//!
//! The crate is organised bottom-up:
//!
//! * [`camera`]: pinhole model, poses, plane-induced homographies.
//! * [`gaussian`]: the 3D Gaussian primitive and the cloud container.
//! * [`render`]: tile rasterizer producing color/depth/normal/alpha maps and its
//!   reverse-mode pass.
//! * [`propagation`]: checkerboard PatchMatch over per-pixel plane hypotheses.
//! * [`densify`]: multi-view consistency filtering, growth selection, spawning
//!   and clone/split/prune.
//! * [`loss`]: photometric and planar losses, PSNR/SSIM.
//! * [`io`]: COLMAP text scenes, PPM/PFM/PLY files, synthetic scenes.
//! * [`train`]: the optimisation loop.

pub mod camera;
pub mod densify;
pub mod error;
pub mod gaussian;
pub mod grid;
pub mod io;
pub mod knn;
pub mod loss;
pub mod optim;
pub mod propagation;
pub mod render;
pub mod train;

pub use camera::{Camera, Intrinsics, PlaneHypothesis, Pose, RelativePose};
pub use error::{Error, Result};
pub use gaussian::{Gaussian, GaussianCloud};
pub use grid::Grid;
pub use io::scene::{CameraView, Scene};

pub use propagation::{PropagatedMaps, PropagationConfig};
pub use render::{GeoMaps, MapGradients};
pub use train::{TrainConfig, TrainReport};

pub use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
