//! Photometric and planar losses with their gradients, plus PSNR/SSIM.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::grid::Grid;

pub type RgbImage = Grid<Vector3<f64>>;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// D-SSIM share of the photometric term.
    pub lambda: f64,
    /// Normal-consistency weight.
    pub beta: f64,
    /// Minimum-scale weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.2,
            beta: 0.001,
            gamma: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("beta and gamma must be non-negative".into()));
        }
        Ok(())
    }
}

/// How a per-pixel loss is reduced over the valid set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// A scalar loss and its gradient with respect to a per-pixel input.
#[derive(Debug, Clone)]
pub struct PixelLoss {
    pub value: f64,
    pub grad: RgbImage,
}

fn check_shape<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "same" filtering with zero padding. The kernel is symmetric, so
/// this is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &RgbImage, c: usize) -> Vec<f64> {
    img.data.iter().map(|p| p[c]).collect()
}

/// Mean SSIM of `a` against `b` and, if requested, its gradient w.r.t. `a`.
fn ssim_impl(a: &RgbImage, b: &RgbImage, want_grad: bool) -> (f64, Option<RgbImage>) {
    let (w, h) = (a.width, a.height);
    let n = (w * h * 3) as f64;
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Grid::new(w, h, Vector3::zeros()));
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let exx = blur(&xx, w, h, &k);
        let eyy = blur(&yy, w, h, &k);
        let exy = blur(&xy, w, h, &k);
        let mut d_mx = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let sx = exx[i] - mx[i] * mx[i];
            let sy = eyy[i] - my[i] * my[i];
            let sxy = exy[i] - mx[i] * my[i];
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = sx + sy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let bb = b1 * b2;
                d_mx[i] = (2.0 * my[i] * a2 - 2.0 * my[i] * a1) / bb - s * (2.0 * mx[i] / b1 - 2.0 * mx[i] / b2);
                d_exx[i] = -s / b2;
                d_exy[i] = 2.0 * a1 / bb;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mx = blur(&d_mx, w, h, &k);
            let g_exx = blur(&d_exx, w, h, &k);
            let g_exy = blur(&d_exy, w, h, &k);
            for i in 0..w * h {
                g.data[i][c] = (g_mx[i] + 2.0 * x[i] * g_exx[i] + y[i] * g_exy[i]) / n;
            }
        }
    }
    (total / n, grad)
}

/// Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5).
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shape(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shape(a, b)?;
    let n = (a.len() * 3) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / n;
    if mse < 1e-10 {
        Ok(PSNR_CAP)
    } else {
        Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
    }
}

/// `(1 - lambda) L1 + lambda (1 - SSIM) / 2` and its gradient w.r.t.
/// `rendered`.
pub fn l1_dssim(rendered: &RgbImage, target: &RgbImage, lambda: f64) -> Result<PixelLoss> {
    check_shape(rendered, target)?;
    let n = (rendered.len() * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = Grid::new(rendered.width, rendered.height, Vector3::zeros());
    for (i, (r, t)) in rendered.data.iter().zip(&target.data).enumerate() {
        let d = r - t;
        l1 += d.abs().sum();
        grad.data[i] = d.map(|v| (1.0 - lambda) * sign(v) / n);
    }
    l1 /= n;
    let mut value = (1.0 - lambda) * l1;
    if lambda > 0.0 {
        let (s, g) = ssim_impl(rendered, target, true);
        value += lambda * (1.0 - s) * 0.5;
        for (dst, gs) in grad.data.iter_mut().zip(g.unwrap().data) {
            *dst -= gs * (0.5 * lambda);
        }
    }
    Ok(PixelLoss { value, grad })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `||N^ - N-||_1 + |1 - N^ . N-|` over the valid pixels, and its gradient
/// w.r.t. the rendered normals.
pub fn normal_loss(
    rendered: &Grid<Vector3<f64>>,
    propagated: &Grid<Vector3<f64>>,
    valid: &Grid<bool>,
    reduction: Reduction,
) -> Result<PixelLoss> {
    check_shape(rendered, propagated)?;
    check_shape(rendered, valid)?;
    let count = valid.data.iter().filter(|v| **v).count();
    let mut grad = Grid::new(rendered.width, rendered.height, Vector3::zeros());
    if count == 0 {
        return Ok(PixelLoss { value: 0.0, grad });
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / count as f64,
        Reduction::Sum => 1.0,
    };
    let mut value = 0.0;
    for i in 0..rendered.len() {
        if !valid.data[i] {
            continue;
        }
        let (a, b) = (rendered.data[i], propagated.data[i]);
        let d = a - b;
        let cos = a.dot(&b);
        value += d.abs().sum() + (1.0 - cos).abs();
        grad.data[i] = (d.map(sign) - b * sign(1.0 - cos)) * scale;
    }
    Ok(PixelLoss {
        value: value * scale,
        grad,
    })
}

/// Mean over Gaussians of the smallest scale, with its gradient w.r.t. the
/// log-scales.
pub fn scale_loss(cloud: &GaussianCloud) -> (f64, Vec<Vector3<f64>>) {
    if cloud.is_empty() {
        return (0.0, Vec::new());
    }
    let n = cloud.len() as f64;
    let mut value = 0.0;
    let grad = cloud
        .iter()
        .map(|g| {
            let k = g.shortest_axis();
            let s = g.log_scales[k].exp();
            value += s;
            let mut d = Vector3::zeros();
            d[k] = s / n;
            d
        })
        .collect();
    (value / n, grad)
}

pub fn planar_loss(normal: f64, scale: f64, weights: &LossWeights) -> f64 {
    weights.beta * normal + weights.gamma * scale
}
