//! Adam over the packed per-Gaussian parameter vector.

use serde::{Deserialize, Serialize};

use crate::gaussian::{Gaussian, GaussianCloud};
use crate::render::GaussianGrad;

/// Position (3), rotation (4), log-scales (3), opacity logit (1), color (3).
pub const PARAMS: usize = 14;

type Packed = [f64; PARAMS];

fn pack(g: &GaussianGrad) -> Packed {
    let mut p = [0.0; PARAMS];
    p[0..3].copy_from_slice(g.position.as_slice());
    p[3..7].copy_from_slice(g.rotation.as_slice());
    p[7..10].copy_from_slice(g.log_scales.as_slice());
    p[10] = g.opacity_raw;
    p[11..14].copy_from_slice(g.color.as_slice());
    p
}

fn apply(g: &mut Gaussian, delta: &Packed) {
    for i in 0..3 {
        g.position[i] -= delta[i];
        g.log_scales[i] -= delta[7 + i];
        g.color[i] -= delta[11 + i];
    }
    for i in 0..4 {
        g.rotation[i] -= delta[3 + i];
    }
    g.opacity_raw -= delta[10];
}

/// Step sizes of the five parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl GroupRates {
    fn expand(&self) -> Packed {
        let mut r = [0.0; PARAMS];
        r[0..3].fill(self.position);
        r[3..7].fill(self.rotation);
        r[7..10].fill(self.scale);
        r[10] = self.opacity;
        r[11..14].fill(self.color);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Packed>,
    v: Vec<Packed>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![[0.0; PARAMS]; len],
            v: vec![[0.0; PARAMS]; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of every Gaussian. The step counter is shared, so
    /// Gaussians added later start with zero moments but the same bias
    /// correction as the rest.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &[GaussianGrad], rates: &GroupRates) {
        assert_eq!(cloud.len(), self.m.len(), "optimizer state out of sync with the cloud");
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = rates.expand();
        for ((g, grad), (m, v)) in cloud.gaussians.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let gp = pack(grad);
            let mut delta = [0.0; PARAMS];
            for i in 0..PARAMS {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gp[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gp[i] * gp[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                delta[i] = lr[i] * mh / (vh.sqrt() + self.eps);
            }
            apply(g, &delta);
        }
    }

    /// Reorders state after densification: entry `i` takes the moments of
    /// `origins[i]`, or zeros for new Gaussians.
    pub fn remap(&mut self, origins: &[Option<usize>]) {
        let pick = |src: &Vec<Packed>| origins.iter().map(|o| o.map_or([0.0; PARAMS], |i| src[i])).collect();
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    /// Appends zero state for `n` new Gaussians.
    pub fn extend(&mut self, n: usize) {
        self.m.extend(std::iter::repeat_n([0.0; PARAMS], n));
        self.v.extend(std::iter::repeat_n([0.0; PARAMS], n));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut cloud = GaussianCloud::new(vec![Gaussian::new(Vector3::zeros(), Vector3::repeat(1.0), 0.5, Vector3::zeros())]);
        let mut adam = Adam::new(1, 0.9, 0.999, 1e-15);
        let grad = GaussianGrad {
            position: Vector3::new(3.0, -0.5, 0.0),
            ..Default::default()
        };
        let rates = GroupRates {
            position: 0.1,
            rotation: 0.0,
            scale: 0.0,
            opacity: 0.0,
            color: 0.0,
        };
        adam.step(&mut cloud, &[grad], &rates);
        let p = cloud.gaussians[0].position;
        assert!((p.x + 0.1).abs() < 1e-12);
        assert!((p.y - 0.1).abs() < 1e-12);
        assert_eq!(p.z, 0.0);
    }

    #[test]
    fn remap_keeps_survivors() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-15);
        adam.m[1][0] = 5.0;
        adam.remap(&[Some(1), None, Some(0)]);
        assert_eq!(adam.len(), 3);
        assert_eq!(adam.m[0][0], 5.0);
        assert_eq!(adam.m[1][0], 0.0);
    }
}
