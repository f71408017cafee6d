//! Fits an [`RdaField`] to measured line integrals.
//!
//! Each step draws a batch of detector rays, samples each ray (hybrid
//! density-driven sampling or the uniform fallback), renders the discrete
//! line integral `sum D_j * delta_j`, and takes one Adam step on the mean
//! squared error. Rays are processed in fixed-size chunks whose gradients
//! are reduced in chunk order, so results do not depend on the worker count.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, Gradients, RdaField, Sequence, Tape};
use crate::geometry::{Ray, Vec3};
use crate::metrics::{evaluate, MetricReport};
use crate::projector::ProjectionSet;
use crate::rng::Prng;
use crate::sampler::{hybrid_sample, uniform_samples, HybridOptions, OccupancyGrid, SampleSet, SegmentMode};
use crate::volume::Volume;

/// Rays per gradient chunk; part of the reduction order.
const RAY_CHUNK: usize = 16;
/// Voxels per extraction work item.
const EXTRACT_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub n1: usize,
    pub n2: usize,
    pub learning_rate: f64,
    /// Rate of the attention projections relative to `learning_rate`.
    /// Attention diverges at rates the hash tables need.
    pub attention_lr_scale: f64,
    /// Multiplicative learning-rate factor per 1000 steps.
    pub lr_decay: f64,
    pub occupancy_refresh_every: usize,
    pub occupancy_res: usize,
    /// Occupancy threshold as a fraction of the running maximum density.
    pub occupancy_tau_rel: f64,
    pub occupancy_ema: f64,
    pub segment_mode: SegmentMode,
    pub seed: u64,
    pub use_xray_sampling: bool,
    pub use_rda: bool,
    pub log_every: usize,
    /// Weight of a smoothed total-variation penalty on consecutive sample
    /// densities along each ray. Zero disables it.
    pub tv_weight: f64,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_rays: 128,
            n1: 32,
            n2: 32,
            learning_rate: 1e-2,
            attention_lr_scale: 1e-3,
            lr_decay: 0.9,
            occupancy_refresh_every: 256,
            occupancy_res: 64,
            occupancy_tau_rel: 0.01,
            occupancy_ema: 0.05,
            segment_mode: SegmentMode::CoarseStrata,
            seed: 0,
            use_xray_sampling: true,
            use_rda: true,
            log_every: 50,
            tv_weight: 0.0,
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("batch_rays", self.batch_rays),
            ("n1", self.n1),
            ("occupancy_refresh_every", self.occupancy_refresh_every),
            ("occupancy_res", self.occupancy_res),
            ("log_every", self.log_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(self.attention_lr_scale > 0.0) {
            return Err(Error::invalid("attention_lr_scale must be > 0"));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::invalid("lr_decay must be > 0"));
        }
        if !(self.occupancy_ema > 0.0 && self.occupancy_ema <= 1.0) {
            return Err(Error::invalid("occupancy_ema must be in (0, 1]"));
        }
        if !(self.occupancy_tau_rel >= 0.0) || !(self.tv_weight >= 0.0) {
            return Err(Error::invalid("occupancy_tau_rel and tv_weight must be >= 0"));
        }
        self.field_config().validate()
    }

    /// Field architecture with the ablation flag applied.
    pub fn field_config(&self) -> FieldConfig {
        FieldConfig { use_attention: self.use_rda, ..self.field }
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * self.lr_decay.powf(step as f64 / 1000.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub rays: u64,
    pub empty_rays: u64,
    pub mean_samples_per_ray: f64,
    pub final_occupied_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over each `log_every` window.
    pub loss_history: Vec<f64>,
    pub final_metrics: Option<MetricReport>,
    pub wall_clock_secs: f64,
    pub sample_stats: SampleStats,
    pub config: TrainConfig,
}

/// `sum D_j * delta_j`.
pub fn render_ray(densities: &[f64], deltas: &[f64]) -> Result<f64> {
    if densities.len() != deltas.len() {
        return Err(Error::invalid(format!(
            "{} densities but {} deltas",
            densities.len(),
            deltas.len()
        )));
    }
    Ok(densities.iter().zip(deltas).map(|(d, w)| d * w).sum())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step_groups(params, grad, &[(params.len(), lr)]);
    }

    /// One update where parameters below `groups[0].0` use rate
    /// `groups[0].1`, the next span up to `groups[1].0` uses `groups[1].1`,
    /// and so on.
    pub fn step_groups(&mut self, params: &mut [f64], grad: &[f64], groups: &[(usize, f64)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut start = 0;
        for &(end, lr) in groups {
            let span = start..end;
            let moments = self.m[span.clone()].iter_mut().zip(self.v[span.clone()].iter_mut());
            for ((p, &g), (m, v)) in params[span.clone()].iter_mut().zip(&grad[span]).zip(moments) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
            start = end;
        }
    }
}

/// Optimization state for one training run.
pub struct Trainer<'a> {
    pub field: RdaField,
    pub grid: OccupancyGrid,
    pub cfg: TrainConfig,
    projections: &'a ProjectionSet,
    /// Flat indices of rays that intersect the volume.
    rays: Vec<usize>,
    adam: Adam,
    grad: Vec<f64>,
    rng: Prng,
    step: usize,
    running_max_density: f64,
    stats: SampleStats,
}

struct RayOutcome {
    loss: f64,
    samples: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(projections: &'a ProjectionSet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        projections.validate()?;
        let geom = &projections.geom;
        let bounds = geom.volume_bounds;
        let mut rng = Prng::new(cfg.seed);
        let field = RdaField::new(cfg.field_config(), bounds, &mut rng)?;
        let grid = OccupancyGrid::full([cfg.occupancy_res; 3], bounds)?;
        let rays: Vec<usize> = (0..geom.total_rays()).filter(|&i| !geom.ray_at_index(i).is_empty()).collect();
        if rays.is_empty() {
            return Err(Error::InvalidState("no detector ray intersects the volume".into()));
        }
        let n = field.n_params();
        Ok(Self {
            field,
            grid,
            cfg,
            projections,
            rays,
            adam: Adam::new(n),
            grad: vec![0.0; n],
            rng,
            step: 0,
            running_max_density: 0.0,
            stats: SampleStats::default(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn sample_ray(&self, ray: &Ray, rng: &mut Prng) -> Result<SampleSet> {
        let cfg = &self.cfg;
        if !cfg.use_xray_sampling {
            return Ok(uniform_samples(ray, cfg.n1 + cfg.n2, rng));
        }
        let opts = HybridOptions { n1: cfg.n1, n2: cfg.n2, segments: cfg.segment_mode };
        let field = &self.field;
        hybrid_sample(&self.grid, ray, opts, rng, |t| {
            let pts: Vec<Vec3> = t.iter().map(|&ti| field.normalize(ray.at(ti))).collect();
            let tn = normalized_t(ray, t);
            field.forward(&Sequence { points: &pts, t_norm: Some(&tn), segments: None }, None)
        })
    }

    fn ray_loss_and_grad(
        &self,
        ray_index: usize,
        rng: &mut Prng,
        batch: usize,
        tape: &mut Tape,
        grads: &mut Gradients,
    ) -> Result<RayOutcome> {
        let ray = self.projections.geom.ray_at_index(ray_index);
        let measured = self.projections.value_at_index(ray_index) as f64;
        let samples = self.sample_ray(&ray, rng)?;
        if samples.is_empty() {
            return Ok(RayOutcome { loss: measured * measured, samples: 0 });
        }
        let pts: Vec<Vec3> = samples.t_values.iter().map(|&t| self.field.normalize(ray.at(t))).collect();
        let tn = normalized_t(&ray, &samples.t_values);
        let seq = Sequence { points: &pts, t_norm: Some(&tn), segments: Some(&samples.segment_ids) };
        let dens = self.field.forward(&seq, Some(tape));
        let predicted = render_ray(&dens, &samples.deltas)?;
        let residual = predicted - measured;
        let scale = 2.0 * residual / batch as f64;
        let mut upstream: Vec<f64> = samples.deltas.iter().map(|&dt| scale * dt).collect();
        let mut loss = residual * residual;
        if self.cfg.tv_weight > 0.0 {
            loss += self.cfg.tv_weight * tv_penalty(&dens, &mut upstream, self.cfg.tv_weight / batch as f64);
        }
        self.field.backward(tape, &upstream, grads)?;
        Ok(RayOutcome { loss, samples: samples.len() })
    }

    /// One optimization step; returns the batch mean loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.cfg.batch_rays;
        if batch == 0 {
            return Err(Error::InvalidState("empty ray batch".into()));
        }
        let step_seed = self.rng.next_u64();
        let picks: Vec<usize> = (0..batch).map(|_| self.rays[self.rng.below(self.rays.len())]).collect();

        let this = &*self;
        let chunks: Vec<Result<(f64, Gradients, usize, usize, usize)>> = picks
            .par_chunks(RAY_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut grads = Gradients::zeros(&this.field.layout);
                let mut tape = Tape::new();
                let (mut loss, mut samples, mut empty) = (0.0, 0, 0);
                for (k, &ray_index) in chunk.iter().enumerate() {
                    let slot = (c * RAY_CHUNK + k) as u64;
                    let mut rng = Prng::with_stream(step_seed, slot);
                    let out = this.ray_loss_and_grad(ray_index, &mut rng, batch, &mut tape, &mut grads)?;
                    loss += out.loss;
                    samples += out.samples;
                    empty += usize::from(out.samples == 0);
                }
                Ok((loss, grads, samples, empty, chunk.len()))
            })
            .collect();

        self.grad.fill(0.0);
        let mut total = 0.0;
        for chunk in chunks {
            let (loss, grads, samples, empty, count) = chunk?;
            total += loss;
            grads.accumulate_into(&mut self.grad, &self.field.layout);
            self.stats.rays += count as u64;
            self.stats.mean_samples_per_ray += samples as f64;
            self.stats.empty_rays += empty as u64;
        }
        let lr = self.cfg.learning_rate_at(self.step);
        let d = self.field.config.width;
        let slow = lr * self.cfg.attention_lr_scale;
        let mut groups: Vec<(usize, f64)> = Vec::new();
        for b in &self.field.layout.blocks {
            groups.push((b.query, lr));
            groups.push((b.out + d * d, slow));
        }
        groups.push((self.field.n_params(), lr));
        self.adam.step_groups(&mut self.field.params, &self.grad, &groups);
        self.step += 1;
        if self.step % self.cfg.occupancy_refresh_every == 0 && self.cfg.use_xray_sampling {
            self.refresh_occupancy()?;
        }
        Ok(total / batch as f64)
    }

    /// Re-evaluates the occupancy grid against the current field.
    pub fn refresh_occupancy(&mut self) -> Result<()> {
        let field = &self.field;
        let mut rng = self.rng.fork(u64::MAX);
        let observed = self.grid.observe(|p| field.density_at(p), &mut rng);
        let max_seen = observed.iter().copied().fold(0.0, f64::max);
        self.running_max_density = self.running_max_density.max(max_seen);
        let tau = self.cfg.occupancy_tau_rel * self.running_max_density;
        self.grid.fold(&observed, tau, self.cfg.occupancy_ema)
    }

    pub fn finish_stats(&self) -> SampleStats {
        let mut s = self.stats.clone();
        if s.rays > 0 {
            s.mean_samples_per_ray /= s.rays as f64;
        }
        s.final_occupied_fraction = self.grid.occupied_fraction();
        s
    }
}

/// Smoothed TV along the sequence; adds `weight_grad * dTV/dD` to `upstream`.
fn tv_penalty(dens: &[f64], upstream: &mut [f64], weight_grad: f64) -> f64 {
    const EPS: f64 = 1e-8;
    let mut tv = 0.0;
    for j in 1..dens.len() {
        let diff = dens[j] - dens[j - 1];
        let mag = (diff * diff + EPS).sqrt();
        tv += mag;
        let g = weight_grad * diff / mag;
        upstream[j] += g;
        upstream[j - 1] -= g;
    }
    tv
}

fn normalized_t(ray: &Ray, t: &[f64]) -> Vec<f64> {
    let len = ray.length().max(f64::MIN_POSITIVE);
    t.iter().map(|&ti| ((ti - ray.t_min) / len).clamp(0.0, 1.0)).collect()
}

/// Runs `cfg.iterations` steps, refreshing occupancy on schedule, and scores
/// the extracted volume against `gt` when given.
pub fn train(projections: &ProjectionSet, cfg: &TrainConfig, gt: Option<&Volume>) -> Result<(RdaField, TrainReport)> {
    train_with_progress(projections, cfg, gt, |_, _| {})
}

pub fn train_with_progress(
    projections: &ProjectionSet,
    cfg: &TrainConfig,
    gt: Option<&Volume>,
    mut progress: impl FnMut(usize, f64),
) -> Result<(RdaField, TrainReport)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(projections, cfg.clone())?;
    let mut history = Vec::new();
    let mut window = 0.0;
    for step in 0..cfg.iterations {
        let loss = trainer.train_step()?;
        if !loss.is_finite() {
            return Err(Error::InvalidState(format!("loss became non-finite at step {step}")));
        }
        window += loss;
        if (step + 1) % cfg.log_every == 0 {
            let mean = window / cfg.log_every as f64;
            history.push(mean);
            progress(step + 1, mean);
            window = 0.0;
        }
    }
    let stats = trainer.finish_stats();
    let field = trainer.field;
    let final_metrics = match gt {
        Some(gt) => {
            let vol = extract_volume(&field, gt.dims, gt.spacing, gt.origin)?;
            Some(evaluate(gt, &vol, None, None)?)
        }
        None => None,
    };
    let report = TrainReport {
        loss_history: history,
        final_metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        sample_stats: stats,
        config: cfg.clone(),
    };
    Ok((field, report))
}

/// Queries the field at every voxel centre, one length-one sequence per voxel.
pub fn extract_volume(field: &RdaField, dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Volume> {
    let mut vol = Volume::zeros(dims, spacing, origin)?;
    let [nx, ny, _] = dims;
    let n = vol.len();
    let values: Vec<f32> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(EXTRACT_CHUNK)
        .flat_map_iter(|chunk| {
            chunk
                .iter()
                .map(|&idx| {
                    let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
                    let p = origin + Vec3::new(i as f64, j as f64, k as f64).mul_elem(spacing);
                    field.density_at(p) as f32
                })
                .collect::<Vec<_>>()
        })
        .collect();
    vol.data = values;
    Ok(vol)
}
