//! The optimisation loop.
//!
//! Each iteration renders one training view (round robin), evaluates
//! `(1 - lambda) L1 + lambda D-SSIM + beta L_normal + gamma L_scale`,
//! backpropagates and takes an Adam step. Inside their windows, clone/split
//! densification runs every `densify_interval` iterations and the
//! propagation pass (propagate, filter, select, spawn) every
//! `propagation_interval` iterations. The normal loss uses the most recent
//! filtered propagated normals of the rendered view, so it is zero until
//! that view has been propagated once.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densify::{
    clone_split_prune, geometric_filter, select_growth_pixels, spawn_gaussians, DensifyConfig, FilterConfig, SpawnConfig,
};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::grid::Grid;
use crate::io::image::write_ppm;
use crate::io::ply::write_ply;
use crate::io::scene::Scene;
use crate::loss::{l1_dssim, normal_loss, psnr, scale_loss, ssim, LossWeights, Reduction};
use crate::optim::{Adam, GroupRates};
use crate::propagation::{nearest_views, propagate, MatchView, PropagationConfig};
use crate::render::{render, Frame, GeoMaps, MapGradients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    /// Position rate reached (exponentially) at the last iteration.
    pub position_final: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub lr: LearningRates,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify: DensifyConfig,
    /// No clone/split or spawning once the cloud has this many Gaussians.
    pub max_gaussians: usize,

    pub use_propagation: bool,
    /// Run propagation every this many iterations (`m`).
    pub propagation_interval: usize,
    pub propagation_from: usize,
    pub propagation_until: usize,
    pub propagation: PropagationConfig,
    /// Nearest training views propagated alongside the current one so the
    /// consistency filter has something to compare against.
    pub propagation_group: usize,
    pub filter: FilterConfig,
    pub spawn: SpawnConfig,
    /// Relative depth difference above which a pixel grows new Gaussians.
    pub sigma: f64,

    /// Every `holdout_every`-th view (starting with the first) is held out
    /// for evaluation; 0 trains on everything.
    pub holdout_every: usize,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            seed: 0,
            loss: LossWeights::default(),
            lr: LearningRates::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            densify_interval: 100,
            densify_from: 500,
            densify_until: 15000,
            densify: DensifyConfig::default(),
            max_gaussians: 50_000,
            use_propagation: true,
            propagation_interval: 50,
            propagation_from: 500,
            propagation_until: 15000,
            propagation: PropagationConfig::default(),
            propagation_group: 2,
            filter: FilterConfig::default(),
            spawn: SpawnConfig::default(),
            sigma: 0.8,
            holdout_every: 8,
            eval_interval: 500,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    /// Plain 3DGS: no propagation and no planar terms.
    pub fn control(mut self) -> Self {
        self.use_propagation = false;
        self.loss.beta = 0.0;
        self.loss.gamma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.propagation_interval == 0 || self.densify_interval == 0 {
            return bad("intervals must be at least 1".into());
        }
        if self.propagation_interval > self.iterations || self.densify_interval > self.iterations {
            return bad(format!(
                "intervals (densify {}, propagation {}) exceed the {} iterations",
                self.densify_interval, self.propagation_interval, self.iterations
            ));
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam constants".into());
        }
        let lr = &self.lr;
        if [lr.position, lr.position_final, lr.color, lr.opacity, lr.scale, lr.rotation].iter().any(|v| !(*v >= 0.0)) {
            return bad("learning rates must be non-negative".into());
        }
        if self.lr.position > 0.0 && !(self.lr.position_final > 0.0) {
            return bad("position_final must be positive when position is".into());
        }
        self.loss.validate()?;
        self.propagation.validate()
    }

    fn position_rate(&self, iteration: usize, extent: f64) -> f64 {
        let t = if self.iterations <= 1 {
            1.0
        } else {
            ((iteration - 1) as f64 / (self.iterations - 1) as f64).clamp(0.0, 1.0)
        };
        let lr = if self.lr.position > 0.0 {
            (self.lr.position.ln() * (1.0 - t) + self.lr.position_final.ln() * t).exp()
        } else {
            0.0
        };
        lr * extent
    }

    fn in_window(iteration: usize, interval: usize, from: usize, until: usize) -> bool {
        iteration >= from && iteration <= until && iteration % interval == 0
    }
}

/// One line of `metrics.jsonl`. Contains no timing, so two runs with the same
/// seed and thread count produce identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub view: u32,
    pub loss: f64,
    pub photometric: f64,
    pub normal: f64,
    pub scale: f64,
    pub gaussians: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spawned: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub densified: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub psnr: f64,
    pub ssim: f64,
    pub gaussian_count: usize,
    pub wall_time: f64,
    pub iterations: usize,
    pub spawned_total: usize,
    pub test_views: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    pub metrics: Vec<IterationMetrics>,
    pub report: TrainReport,
}

/// Indices of held-out and training views.
pub fn split_views(count: usize, holdout_every: usize) -> (Vec<usize>, Vec<usize>) {
    if holdout_every == 0 {
        return (Vec::new(), (0..count).collect());
    }
    (0..count).partition(|i| i % holdout_every == 0)
}

struct CachedNormals {
    normal: Grid<Vector3<f64>>,
    valid: Grid<bool>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    scene: &'a Scene,
    pub cloud: GaussianCloud,
    adam: Adam,
    rng: ChaCha8Rng,
    extent: f64,
    train_views: Vec<usize>,
    test_views: Vec<usize>,
    cached: Vec<Option<CachedNormals>>,
    iteration: usize,
    spawned_total: usize,
    snapshot_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(scene: &'a Scene, cloud: GaussianCloud, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (test_views, train_views) = split_views(scene.views.len(), cfg.holdout_every);
        if train_views.len() < 2 {
            return Err(Error::InvalidConfig(format!("need at least two training views, have {}", train_views.len())));
        }
        let n = cloud.len();
        Ok(Trainer {
            adam: Adam::new(n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            extent: scene.camera_extent(),
            cached: (0..scene.views.len()).map(|_| None).collect(),
            cfg,
            scene,
            cloud,
            train_views,
            test_views,
            iteration: 0,
            spawned_total: 0,
            snapshot_dir: None,
        })
    }

    /// Where to dump the cloud if the loss stops being finite.
    pub fn with_snapshot_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.snapshot_dir = Some(dir.into());
        self
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn test_views(&self) -> &[usize] {
        &self.test_views
    }

    fn non_finite(&self, view: usize) -> Error {
        let snapshot = self.snapshot_dir.as_ref().and_then(|dir| {
            let path = dir.join(format!("nonfinite_{:06}.ply", self.iteration));
            fs::create_dir_all(dir).ok()?;
            write_ply(&path, &self.cloud).ok().map(|_| path)
        });
        Error::NonFinite {
            iteration: self.iteration,
            view,
            snapshot,
        }
    }

    /// Runs one iteration and returns its log line.
    pub fn step(&mut self) -> Result<IterationMetrics> {
        self.iteration += 1;
        let it = self.iteration;
        let cfg = self.cfg.clone();
        let scene = self.scene;
        let vi = self.train_views[(it - 1) % self.train_views.len()];
        let view = &scene.views[vi];
        let (w, h) = (view.camera.width(), view.camera.height());

        let frame = Frame::prepare(&view.camera, &self.cloud);
        let maps = frame.forward();
        let photo = l1_dssim(&maps.color, &view.image, cfg.loss.lambda)?;
        let mut upstream = MapGradients::zeros(w, h);
        upstream.color = photo.grad;

        let mut normal_value = 0.0;
        if cfg.loss.beta > 0.0 {
            if let Some(c) = &self.cached[vi] {
                let nl = normal_loss(&maps.normal, &c.normal, &c.valid, Reduction::Mean)?;
                normal_value = nl.value;
                upstream.normal = nl.grad.map(|g| g * cfg.loss.beta);
            }
        }
        let (scale_value, scale_grad) = if cfg.loss.gamma > 0.0 {
            scale_loss(&self.cloud)
        } else {
            (0.0, Vec::new())
        };
        let loss = photo.value + cfg.loss.beta * normal_value + cfg.loss.gamma * scale_value;
        if !loss.is_finite() {
            return Err(self.non_finite(vi));
        }

        let mut grads = frame.backward(&self.cloud, &upstream);
        for (g, s) in grads.gaussians.iter_mut().zip(&scale_grad) {
            g.log_scales += s * cfg.loss.gamma;
        }
        if grads.gaussians.iter().any(|g| !g.is_finite()) {
            return Err(self.non_finite(vi));
        }
        if it <= cfg.densify_until {
            for (i, n) in grads.ndc_norms(w, h).into_iter().enumerate() {
                if grads.visible[i] {
                    self.cloud.record_gradient(i, n);
                }
            }
        }
        let rates = GroupRates {
            position: cfg.position_rate(it, self.extent),
            rotation: cfg.lr.rotation,
            scale: cfg.lr.scale,
            opacity: cfg.lr.opacity,
            color: cfg.lr.color,
        };
        self.adam.step(&mut self.cloud, &grads.gaussians, &rates);
        for g in self.cloud.gaussians.iter_mut() {
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
        }

        let mut record = IterationMetrics {
            iteration: it,
            view: view.id,
            loss,
            photometric: photo.value,
            normal: normal_value,
            scale: scale_value,
            gaussians: 0,
            spawned: None,
            densified: None,
            test_psnr: None,
        };

        if TrainConfig::in_window(it, cfg.densify_interval, cfg.densify_from, cfg.densify_until) {
            let grow = self.cloud.len() < cfg.max_gaussians;
            let mut dcfg = cfg.densify;
            if !grow {
                dcfg.grad_threshold = f64::INFINITY;
            }
            let out = clone_split_prune(&mut self.cloud, &dcfg, self.extent, &mut self.rng);
            self.adam.remap(&out.origins);
            record.densified = Some([out.cloned, out.split, out.pruned]);
        }

        if cfg.use_propagation && TrainConfig::in_window(it, cfg.propagation_interval, cfg.propagation_from, cfg.propagation_until) {
            let spawned = self.propagation_pass(vi)?;
            self.spawned_total += spawned;
            record.spawned = Some(spawned);
        }

        if cfg.eval_interval > 0 && it % cfg.eval_interval == 0 {
            record.test_psnr = Some(self.evaluate()?.0);
        }
        record.gaussians = self.cloud.len();
        Ok(record)
    }

    /// Propagates view `vi` and its nearest training views, filters them
    /// against each other, caches their normals for the planar loss and
    /// spawns Gaussians from `vi`. Returns the number spawned.
    fn propagation_pass(&mut self, vi: usize) -> Result<usize> {
        let cfg = self.cfg.clone();
        let scene = self.scene;
        let train_cams: Vec<_> = self.train_views.iter().map(|&i| self.scene.views[i].camera).collect();
        let local = self.train_views.iter().position(|&i| i == vi).unwrap();
        let mut group = vec![local];
        group.extend(nearest_views(&train_cams, local, cfg.propagation_group));

        let mut rendered = Vec::with_capacity(group.len());
        let mut propagated = Vec::with_capacity(group.len());
        for &g in &group {
            let view = &scene.views[self.train_views[g]];
            let maps = render(&view.camera, &self.cloud);
            let reference = MatchView::new(view.camera, &view.image);
            let sources: Vec<MatchView> = nearest_views(&train_cams, g, cfg.propagation.num_neighbor_views)
                .into_iter()
                .map(|j| {
                    let v = &scene.views[self.train_views[j]];
                    MatchView::new(v.camera, &v.image)
                })
                .collect();
            propagated.push(propagate(&reference, &sources, &maps, &cfg.propagation)?);
            rendered.push(maps);
        }
        let cams: Vec<_> = group.iter().map(|&g| train_cams[g]).collect();
        let filtered = geometric_filter(&cams, &propagated, &cfg.filter)?;
        for (&g, f) in group.iter().zip(&filtered) {
            self.cached[self.train_views[g]] = Some(CachedNormals {
                normal: f.normal.clone(),
                valid: f.valid.clone(),
            });
        }
        if self.cloud.len() >= cfg.max_gaussians {
            return Ok(0);
        }
        let mask = select_growth_pixels(&filtered[0], &rendered[0], cfg.sigma)?;
        let room = cfg.max_gaussians - self.cloud.len();
        let mask = cap_mask(mask, cfg.spawn.stride, room);
        let added = spawn_gaussians(&mask, &filtered[0], &scene.views[vi], &mut self.cloud, &cfg.spawn)?;
        self.adam.extend(added);
        Ok(added)
    }

    /// Mean PSNR and SSIM over the held-out views (training views if none
    /// are held out).
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let views = if self.test_views.is_empty() { &self.train_views } else { &self.test_views };
        let mut p = 0.0;
        let mut s = 0.0;
        for &i in views {
            let v = &self.scene.views[i];
            let img = render(&v.camera, &self.cloud).color;
            p += psnr(&img, &v.image)?;
            s += ssim(&img, &v.image)?;
        }
        let n = views.len() as f64;
        Ok((p / n, s / n))
    }

    pub fn render_view(&self, index: usize) -> GeoMaps {
        render(&self.scene.views[index].camera, &self.cloud)
    }
}

/// Drops masked pixels beyond the first `room` that would spawn.
fn cap_mask(mut mask: Grid<bool>, stride: usize, room: usize) -> Grid<bool> {
    let stride = stride.max(1);
    let mut seen = 0;
    for y in 0..mask.height {
        for x in 0..mask.width {
            let i = y * mask.width + x;
            if !mask.data[i] {
                continue;
            }
            if x % stride == 0 && y % stride == 0 {
                seen += 1;
                if seen > room {
                    mask.data[i] = false;
                }
            }
        }
    }
    mask
}

/// Trains from `cloud`. When `out` is given, writes `metrics.jsonl`,
/// checkpoints, `cloud.ply`, held-out renders and `report.json` there.
pub fn train(scene: &Scene, cloud: GaussianCloud, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut trainer = Trainer::new(scene, cloud, cfg.clone())?;
    let mut log: Option<BufWriter<File>> = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trainer = trainer.with_snapshot_dir(dir);
        let p = dir.join("metrics.jsonl");
        log = Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?));
    }
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let m = trainer.step()?;
        if let (Some(w), Some(dir)) = (log.as_mut(), out) {
            let line = serde_json::to_string(&m).expect("metrics serialise");
            writeln!(w, "{line}").map_err(|e| Error::io(dir.join("metrics.jsonl"), e))?;
            if cfg.checkpoint_interval > 0 && m.iteration % cfg.checkpoint_interval == 0 {
                write_ply(dir.join(format!("checkpoint_{:06}.ply", m.iteration)), &trainer.cloud)?;
            }
        }
        log::debug!("iter {} loss {:.5} gaussians {}", m.iteration, m.loss, m.gaussians);
        metrics.push(m);
    }
    if let (Some(mut w), Some(dir)) = (log, out) {
        w.flush().map_err(|e| Error::io(dir.join("metrics.jsonl"), e))?;
    }
    let (p, s) = trainer.evaluate()?;
    let report = TrainReport {
        psnr: p,
        ssim: s,
        gaussian_count: trainer.cloud.len(),
        wall_time: start.elapsed().as_secs_f64(),
        iterations: cfg.iterations,
        spawned_total: trainer.spawned_total,
        test_views: trainer.test_views.iter().map(|&i| scene.views[i].id).collect(),
    };
    if let Some(dir) = out {
        write_ply(dir.join("cloud.ply"), &trainer.cloud)?;
        let renders = dir.join("renders");
        let gt = dir.join("gt");
        for d in [&renders, &gt] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for &i in &trainer.test_views {
            let v = &scene.views[i];
            let name = format!("{}.ppm", v.stem());
            write_ppm(renders.join(&name), &trainer.render_view(i).color)?;
            write_ppm(gt.join(&name), &v.image)?;
        }
        let rp = dir.join("report.json");
        fs::write(&rp, serde_json::to_string_pretty(&report).expect("report serialises")).map_err(|e| Error::io(&rp, e))?;
    }
    Ok(TrainOutcome {
        cloud: trainer.cloud,
        metrics,
        report,
    })
}
