//! Simultaneous algebraic reconstruction over the matched projector pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::projector::{backproject, forward_project, ProjectionSet};
use crate::volume::Volume;

const GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SartConfig {
    pub iterations: usize,
    pub relaxation: f64,
    pub nonneg_clamp: bool,
    /// Integration step; `None` uses half the smallest voxel spacing.
    pub step: Option<f64>,
}

impl Default for SartConfig {
    fn default() -> Self {
        Self { iterations: 20, relaxation: 1.0, nonneg_clamp: true, step: None }
    }
}

impl SartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("SART iterations must be >= 1"));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::invalid(format!("SART relaxation must lie in (0, 2), got {}", self.relaxation)));
        }
        Ok(())
    }
}

/// Row sums (`A 1`) and column sums (`A^T 1`) of the system matrix.
pub struct SartWeights {
    pub rows: ProjectionSet,
    pub cols: Volume,
    pub step: f64,
}

impl SartWeights {
    pub fn new(template: &Volume, p: &ProjectionSet, step: f64) -> Result<Self> {
        let ones = Volume { data: vec![1.0; template.len()], ..template.clone() };
        let rows = forward_project(&ones, &p.geom, step)?;
        let cols = backproject(&ProjectionSet::filled(p.geom.clone(), 1.0), template.dims, template.spacing, template.origin, step)?;
        Ok(Self { rows, cols, step })
    }
}

/// One simultaneous sweep over all views:
/// `x += lambda * A^T((p - A x) / rowsum) / colsum`.
pub fn sart_iterate(x: &Volume, p: &ProjectionSet, cfg: &SartConfig, weights: &SartWeights) -> Result<Volume> {
    let ax = forward_project(x, &p.geom, weights.step)?;
    let normalized = p.map2(&ax, |m, e| m - e).map2(&weights.rows, |r, w| {
        if (w as f64) > GUARD {
            r / w
        } else {
            0.0
        }
    });
    let correction = backproject(&normalized, x.dims, x.spacing, x.origin, weights.step)?;
    let mut out = x.clone();
    for ((o, &c), &w) in out.data.iter_mut().zip(&correction.data).zip(&weights.cols.data) {
        if (w as f64) > GUARD {
            *o += (cfg.relaxation * c as f64 / w as f64) as f32;
        }
        if cfg.nonneg_clamp && *o < 0.0 {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// `cfg.iterations` sweeps from a zero volume.
pub fn sart_reconstruct(p: &ProjectionSet, dims: [usize; 3], spacing: Vec3, origin: Vec3, cfg: &SartConfig) -> Result<Volume> {
    sart_reconstruct_with(p, dims, spacing, origin, cfg, |_, _| {})
}

/// As [`sart_reconstruct`], calling `observe(iteration, volume)` after each sweep.
pub fn sart_reconstruct_with(
    p: &ProjectionSet,
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
    cfg: &SartConfig,
    mut observe: impl FnMut(usize, &Volume),
) -> Result<Volume> {
    cfg.validate()?;
    p.validate()?;
    let mut x = Volume::zeros(dims, spacing, origin)?;
    let step = cfg.step.unwrap_or(0.5 * spacing.min_elem());
    let weights = SartWeights::new(&x, p, step)?;
    for it in 0..cfg.iterations {
        x = sart_iterate(&x, p, cfg, &weights)?;
        observe(it, &x);
    }
    Ok(x)
}
