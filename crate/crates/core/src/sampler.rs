//! Density-driven hybrid ray sampling.
//!
//! A ray is first reduced to the union of its occupied intervals (an
//! occupancy-grid DDA walk skips near-empty space). `n1` stratified coarse
//! samples are spread over that union by arc length; the field densities at
//! those samples form a PDF over the coarse strata, and `n2` fine samples are
//! placed by systematic resampling against that PDF. Coarse and fine samples
//! are merged into one sorted [`SampleSet`].
//!
//! Stratum edges are kept in arc-length coordinates over the interval union
//! and mapped back to ray parameters last, so a stratum that straddles a
//! skipped gap never places a sample inside the gap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_aabb_intersect, Aabb, Ray, Vec3};
use crate::rng::Prng;

/// Additive floor on densities before normalization.
pub const PDF_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub res: [usize; 3],
    pub bounds: Aabb,
    pub occupied: Vec<bool>,
    pub ema_density: Vec<f64>,
}

impl OccupancyGrid {
    /// Fully occupied grid with unit EMA density in every cell.
    pub fn full(res: [usize; 3], bounds: Aabb) -> Result<Self> {
        if res.contains(&0) {
            return Err(Error::invalid(format!("occupancy resolution must be >= 1, got {res:?}")));
        }
        let n = res.iter().product();
        Ok(Self { res, bounds, occupied: vec![true; n], ema_density: vec![1.0; n] })
    }

    pub fn n_cells(&self) -> usize {
        self.occupied.len()
    }

    #[inline]
    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.res[0] * (c[1] + self.res[1] * c[2])
    }

    pub fn cell_size(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(e.x / self.res[0] as f64, e.y / self.res[1] as f64, e.z / self.res[2] as f64)
    }

    pub fn cell_center(&self, c: [usize; 3]) -> Vec3 {
        let s = self.cell_size();
        self.bounds.min + Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5).mul_elem(s)
    }

    /// Cell containing `p`, clamped onto the grid.
    pub fn cell_of(&self, p: Vec3) -> [usize; 3] {
        let g = (p - self.bounds.min).div_elem(self.cell_size());
        let mut c = [0usize; 3];
        for a in 0..3 {
            c[a] = (g[a].floor().max(0.0) as usize).min(self.res[a] - 1);
        }
        c
    }

    pub fn is_occupied_at(&self, p: Vec3) -> bool {
        self.bounds.contains(p) && self.occupied[self.cell_index(self.cell_of(p))]
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied.iter().filter(|&&o| o).count() as f64 / self.n_cells() as f64
    }

    /// One EMA refresh: each cell takes the larger of the density at its centre
    /// and at one jittered point inside it, folds that in with weight `ema`,
    /// and is occupied iff the result exceeds `tau`. Returns the largest
    /// density observed.
    pub fn refresh<F>(&mut self, density: F, tau: f64, ema: f64, rng: &mut Prng) -> Result<f64>
    where
        F: Fn(Vec3) -> f64 + Sync,
    {
        check_refresh_params(tau, ema)?;
        let observed = self.observe(density, rng);
        let max_seen = observed.iter().copied().fold(0.0, f64::max);
        self.fold(&observed, tau, ema)?;
        Ok(max_seen)
    }

    /// Per-cell density observations (centre and one jittered point, max).
    pub fn observe<F>(&self, density: F, rng: &mut Prng) -> Vec<f64>
    where
        F: Fn(Vec3) -> f64 + Sync,
    {
        let size = self.cell_size();
        let jitter: Vec<Vec3> =
            (0..self.n_cells()).map(|_| Vec3::new(rng.uniform(), rng.uniform(), rng.uniform())).collect();
        let [rx, ry, _] = self.res;
        let bounds_min = self.bounds.min;
        (0..self.n_cells())
            .into_par_iter()
            .map(|idx| {
                let c = [idx % rx, (idx / rx) % ry, idx / (rx * ry)];
                let corner = bounds_min + Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64).mul_elem(size);
                let centre = corner + size * 0.5;
                let jittered = corner + jitter[idx].mul_elem(size);
                density(centre).max(density(jittered)).max(0.0)
            })
            .collect()
    }

    /// Folds observations into the EMA and re-thresholds occupancy.
    pub fn fold(&mut self, observed: &[f64], tau: f64, ema: f64) -> Result<()> {
        check_refresh_params(tau, ema)?;
        if observed.len() != self.n_cells() {
            return Err(Error::invalid(format!("{} observations for {} cells", observed.len(), self.n_cells())));
        }
        for ((e, occ), &d) in self.ema_density.iter_mut().zip(self.occupied.iter_mut()).zip(observed) {
            *e = (1.0 - ema) * *e + ema * d;
            *occ = *e > tau;
        }
        Ok(())
    }
}

fn check_refresh_params(tau: f64, ema: f64) -> Result<()> {
    if !(ema > 0.0 && ema <= 1.0) {
        return Err(Error::invalid(format!("EMA factor must be in (0, 1], got {ema}")));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("occupancy threshold must be >= 0, got {tau}")));
    }
    Ok(())
}

/// Fresh fully occupied grid followed by one refresh against `density`.
pub fn build_occupancy<F>(
    density: F,
    res: [usize; 3],
    bounds: Aabb,
    tau: f64,
    ema: f64,
    rng: &mut Prng,
) -> Result<OccupancyGrid>
where
    F: Fn(Vec3) -> f64 + Sync,
{
    let mut grid = OccupancyGrid::full(res, bounds)?;
    grid.refresh(density, tau, ema, rng)?;
    Ok(grid)
}

/// Amanatides-Woo walk over the grid cells pierced by `ray` within
/// `[ray.t_min, ray.t_max]`, merging runs of occupied cells into maximal
/// `(t_enter, t_exit)` intervals.
pub fn traverse_occupied(grid: &OccupancyGrid, ray: &Ray) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let Some((near, far)) = ray_aabb_intersect(ray, &grid.bounds) else {
        return out;
    };
    let t0 = near.max(ray.t_min);
    let t1 = far.min(ray.t_max);
    if !(t1 > t0) {
        return out;
    }
    let size = grid.cell_size();
    // Seed from a point just past the entry so starts on a cell face land in
    // the cell the ray is heading into.
    let mut cell = grid.cell_of(ray.at(t0 + 1e-9 * (t1 - t0)));
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let d = ray.direction[a];
        if d > 0.0 {
            step[a] = 1;
            let boundary = grid.bounds.min[a] + (cell[a] + 1) as f64 * size[a];
            t_next[a] = (boundary - ray.origin[a]) / d;
            t_delta[a] = size[a] / d;
        } else if d < 0.0 {
            step[a] = -1;
            let boundary = grid.bounds.min[a] + cell[a] as f64 * size[a];
            t_next[a] = (boundary - ray.origin[a]) / d;
            t_delta[a] = -size[a] / d;
        }
    }
    let mut t_enter = t0;
    loop {
        let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let t_exit = t_next[axis].min(t1).max(t_enter);
        if grid.occupied[grid.cell_index(cell)] && t_exit > t_enter {
            match out.last_mut() {
                Some(last) if last.1 == t_enter => last.1 = t_exit,
                _ => out.push((t_enter, t_exit)),
            }
        }
        if t_exit >= t1 {
            break;
        }
        let next = cell[axis] as i64 + step[axis];
        if next < 0 || next >= grid.res[axis] as i64 {
            break;
        }
        cell[axis] = next as usize;
        t_enter = t_exit;
        t_next[axis] += t_delta[axis];
    }
    out
}

/// Arc-length parameterization of a sorted union of disjoint intervals.
#[derive(Debug, Clone)]
pub struct IntervalUnion {
    intervals: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
}

impl IntervalUnion {
    pub fn new(intervals: &[(f64, f64)]) -> Self {
        let mut cumulative = Vec::with_capacity(intervals.len() + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for &(a, b) in intervals {
            acc += b - a;
            cumulative.push(acc);
        }
        Self { intervals: intervals.to_vec(), cumulative }
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Interval holding arc length `s`; a shared boundary resolves to the
    /// earlier interval.
    fn locate(&self, s: f64) -> usize {
        let upper = self.cumulative[1..].partition_point(|&c| c < s);
        upper.min(self.intervals.len() - 1)
    }

    /// Ray parameter at arc length `s`, with the interval index.
    pub fn to_ray_param(&self, s: f64) -> (f64, usize) {
        let i = self.locate(s);
        let (a, b) = self.intervals[i];
        ((a + (s - self.cumulative[i])).clamp(a, b), i)
    }
}

/// Coarse samples: the occupied length is split into `n1` equal strata and
/// one uniform sample is drawn inside each. Returns sample parameters and the
/// `n1 + 1` stratum edges, both mapped back into ray-parameter space.
pub fn stratified_coarse(intervals: &[(f64, f64)], n1: usize, rng: &mut Prng) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut draw = || rng.uniform();
    let strata = coarse_strata(intervals, n1, &mut draw)?;
    let union = IntervalUnion::new(intervals);
    let t = strata.samples.iter().map(|&s| union.to_ray_param(s).0).collect();
    let z = strata.edges.iter().map(|&s| union.to_ray_param(s).0).collect();
    Ok((t, z))
}

/// Coarse strata in arc-length coordinates.
#[derive(Debug, Clone)]
pub struct CoarseStrata {
    pub samples: Vec<f64>,
    pub edges: Vec<f64>,
}

pub fn coarse_strata(intervals: &[(f64, f64)], n1: usize, draw: &mut impl FnMut() -> f64) -> Result<CoarseStrata> {
    if n1 == 0 {
        return Err(Error::invalid("n1 must be >= 1"));
    }
    if intervals.is_empty() {
        return Err(Error::invalid("stratified sampling needs at least one interval"));
    }
    let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    let width = total / n1 as f64;
    let edges = (0..=n1).map(|i| if i == n1 { total } else { i as f64 * width }).collect();
    let samples = (0..n1).map(|i| (i as f64 + draw()) * width).collect();
    Ok(CoarseStrata { samples, edges })
}

/// Normalized PDF with an `PDF_EPSILON` floor, plus its inclusive CDF whose
/// last entry is exactly one.
pub fn density_pdf(w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let total: f64 = w.iter().map(|&x| x.max(0.0) + PDF_EPSILON).sum();
    let pdf: Vec<f64> = w.iter().map(|&x| (x.max(0.0) + PDF_EPSILON) / total).collect();
    let mut cdf: Vec<f64> = pdf
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    (pdf, cdf)
}

/// Systematic fine resampling. The positions `(k + v) / n2` pick a segment
/// by inverting the CDF of `pdf`; sample `k` then sits at
/// `z[i] + frac(v + k / n2) * (z[i + 1] - z[i])` in its segment `i`.
/// Output is sorted ascending.
pub fn systematic_fine(z: &[f64], pdf: &[f64], n2: usize, v: f64) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = systematic_allocate(z, pdf, n2, v)?.into_iter().map(|(t, _)| t).collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Unsorted `(position, segment)` pairs in `k` order.
pub fn systematic_allocate(z: &[f64], pdf: &[f64], n2: usize, v: f64) -> Result<Vec<(f64, usize)>> {
    if z.len() != pdf.len() + 1 || pdf.is_empty() {
        return Err(Error::invalid(format!(
            "segment edges ({}) must number one more than pdf bins ({})",
            z.len(),
            pdf.len()
        )));
    }
    if !(0.0..1.0).contains(&v) {
        return Err(Error::invalid(format!("systematic offset must lie in [0, 1), got {v}")));
    }
    let mut cdf: Vec<f64> = pdf
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    *cdf.last_mut().unwrap() = 1.0;
    let last = pdf.len() - 1;
    let mut out = Vec::with_capacity(n2);
    let mut seg = 0usize;
    for k in 0..n2 {
        let position = (k as f64 + v) / n2 as f64;
        while seg < last && position >= cdf[seg] {
            seg += 1;
        }
        let x = v + k as f64 / n2 as f64;
        let frac = x - x.floor();
        out.push((z[seg] + frac * (z[seg + 1] - z[seg]), seg));
    }
    Ok(out)
}

/// Which partition of the ray the fine-sample PDF is built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// Coarse stratum edges act as segments.
    #[default]
    CoarseStrata,
    /// Each occupied interval is one segment, weighted by the coarse
    /// densities that fall inside it.
    OccupiedIntervals,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Occupied interval holding each sample.
    pub segment_ids: Vec<usize>,
    pub intervals: Vec<(f64, f64)>,
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }

    pub fn points(&self, ray: &Ray) -> Vec<Vec3> {
        self.t_values.iter().map(|&t| ray.at(t)).collect()
    }

    /// Sorts, drops exact duplicates and computes interval-capped deltas.
    fn from_unsorted(mut samples: Vec<(f64, usize)>, intervals: Vec<(f64, f64)>, n_coarse: usize, n_fine: usize) -> Self {
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        samples.dedup_by(|b, a| a.0 == b.0);
        let n = samples.len();
        let mut deltas = Vec::with_capacity(n);
        for (j, &(t, seg)) in samples.iter().enumerate() {
            let seg_end = intervals[seg].1;
            let end = match samples.get(j + 1) {
                Some(&(tn, sn)) if sn == seg => tn,
                _ => seg_end,
            };
            deltas.push(end - t);
        }
        Self {
            t_values: samples.iter().map(|s| s.0).collect(),
            deltas,
            segment_ids: samples.iter().map(|s| s.1).collect(),
            intervals,
            n_coarse,
            n_fine,
        }
    }
}

/// Uniform stratified sampling over the clipped ray segment, the fallback
/// when density-driven sampling is disabled.
pub fn uniform_samples(ray: &Ray, n: usize, rng: &mut Prng) -> SampleSet {
    if ray.is_empty() || n == 0 {
        return SampleSet::default();
    }
    let intervals = vec![(ray.t_min, ray.t_max)];
    let union = IntervalUnion::new(&intervals);
    let mut draw = || rng.uniform();
    let strata = coarse_strata(&intervals, n, &mut draw).expect("n >= 1 and one interval");
    let samples = strata.samples.iter().map(|&s| union.to_ray_param(s)).collect();
    SampleSet::from_unsorted(samples, intervals, n, 0)
}

#[derive(Debug, Clone, Copy)]
pub struct HybridOptions {
    pub n1: usize,
    pub n2: usize,
    pub segments: SegmentMode,
}

/// Full hybrid sampling for one ray. `densities` receives the coarse ray
/// parameters and returns the field density at each.
pub fn hybrid_sample<D>(grid: &OccupancyGrid, ray: &Ray, opts: HybridOptions, rng: &mut Prng, densities: D) -> Result<SampleSet>
where
    D: FnOnce(&[f64]) -> Vec<f64>,
{
    if opts.n1 == 0 {
        return Err(Error::invalid("n1 must be >= 1"));
    }
    let intervals = traverse_occupied(grid, ray);
    if intervals.is_empty() {
        return Ok(SampleSet::default());
    }
    let union = IntervalUnion::new(&intervals);
    let mut draw = || rng.uniform();
    let strata = coarse_strata(&intervals, opts.n1, &mut draw)?;
    let coarse: Vec<(f64, usize)> = strata.samples.iter().map(|&s| union.to_ray_param(s)).collect();
    let coarse_t: Vec<f64> = coarse.iter().map(|c| c.0).collect();
    let w = densities(&coarse_t);
    if w.len() != coarse_t.len() {
        return Err(Error::InvalidState(format!("density provider returned {} values for {} samples", w.len(), coarse_t.len())));
    }
    let v = rng.uniform();
    let fine: Vec<(f64, usize)> = match opts.segments {
        SegmentMode::CoarseStrata => {
            let (pdf, _) = density_pdf(&w);
            systematic_allocate(&strata.edges, &pdf, opts.n2, v)?
                .into_iter()
                .map(|(s, _)| union.to_ray_param(s))
                .collect()
        }
        SegmentMode::OccupiedIntervals => {
            let mut per_interval = vec![0.0; intervals.len()];
            for (&(_, seg), &wi) in coarse.iter().zip(&w) {
                per_interval[seg] += wi.max(0.0);
            }
            let (pdf, _) = density_pdf(&per_interval);
            let edges = union.cumulative.clone();
            systematic_allocate(&edges, &pdf, opts.n2, v)?
                .into_iter()
                .map(|(s, seg)| {
                    let (a, b) = intervals[seg];
                    ((a + (s - union.cumulative[seg])).clamp(a, b), seg)
                })
                .collect()
        }
    };
    let n_fine = fine.len();
    let mut all = coarse;
    all.extend(fine);
    Ok(SampleSet::from_unsorted(all, intervals, opts.n1, n_fine))
}
