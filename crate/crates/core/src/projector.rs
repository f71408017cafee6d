//! Beer-Lambert forward projection in the post-log domain and its matched
//! adjoint.
//!
//! Both operators walk the same midpoint-rule samples along each ray, so
//! `backproject` is the exact transpose of `forward_project`.

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Ray, ScanGeometry, Vec3};
use crate::rng::Prng;
use crate::volume::Volume;

/// Views backprojected together before their buffers are summed. Fixed so
/// the reduction order never depends on the worker count.
const VIEW_GROUP: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub geom: ScanGeometry,
    /// One row-major `rows x cols` image of line integrals per view.
    pub images: Vec<Vec<f32>>,
}

impl ProjectionSet {
    pub fn zeros(geom: ScanGeometry) -> Self {
        let images = vec![vec![0.0; geom.pixels_per_view()]; geom.n_views];
        Self { geom, images }
    }

    pub fn filled(geom: ScanGeometry, value: f32) -> Self {
        let images = vec![vec![value; geom.pixels_per_view()]; geom.n_views];
        Self { geom, images }
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if self.images.len() != self.geom.n_views {
            return Err(Error::invalid(format!(
                "{} projection images for {} views",
                self.images.len(),
                self.geom.n_views
            )));
        }
        let n = self.geom.pixels_per_view();
        if let Some((v, img)) = self.images.iter().enumerate().find(|(_, im)| im.len() != n) {
            return Err(Error::invalid(format!("view {v} has {} pixels, expected {n}", img.len())));
        }
        Ok(())
    }

    /// Line integral of the flat ray index used by `ScanGeometry::ray_at_index`.
    pub fn value_at_index(&self, index: usize) -> f32 {
        let per_view = self.geom.pixels_per_view();
        self.images[index / per_view][index % per_view]
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.images.iter().flatten().copied()
    }

    pub fn dot(&self, other: &ProjectionSet) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a as f64 * b as f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn map2(&self, other: &ProjectionSet, f: impl Fn(f32, f32) -> f32) -> ProjectionSet {
        let images = self
            .images
            .iter()
            .zip(&other.images)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        ProjectionSet { geom: self.geom.clone(), images }
    }
}

/// Visits the midpoint-rule nodes of `ray` with their weights: full steps of
/// length `step`, then one shorter final step weighted by its length.
#[inline]
pub fn for_each_midpoint(ray: &Ray, step: f64, mut f: impl FnMut(Vec3, f64)) {
    if ray.is_empty() {
        return;
    }
    let len = ray.length();
    let full = (len / step).floor() as usize;
    for i in 0..full {
        f(ray.at(ray.t_min + (i as f64 + 0.5) * step), step);
    }
    let rest = len - full as f64 * step;
    if rest > 0.0 {
        f(ray.at(ray.t_min + full as f64 * step + 0.5 * rest), rest);
    }
}

/// ∫ μ(r(t)) dt over the ray segment by the midpoint rule.
pub fn project_ray(vol: &Volume, ray: &Ray, step: f64) -> f64 {
    assert!(step > 0.0, "projection step must be positive");
    let mut acc = 0.0;
    for_each_midpoint(ray, step, |p, w| acc += w * vol.sample_trilinear(p));
    acc
}

pub fn default_step(vol: &Volume) -> f64 {
    0.5 * vol.spacing.min_elem()
}

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("projection step must be > 0, got {step}")))
    }
}

pub fn forward_project(vol: &Volume, geom: &ScanGeometry, step: f64) -> Result<ProjectionSet> {
    check_step(step)?;
    geom.validate()?;
    let per_view = geom.pixels_per_view();
    let images = (0..geom.n_views)
        .map(|view| {
            (0..per_view)
                .into_par_iter()
                .map(|pix| {
                    let ray = geom.ray_unchecked(view, pix / geom.detector_cols, pix % geom.detector_cols);
                    project_ray(vol, &ray, step) as f32
                })
                .collect()
        })
        .collect();
    Ok(ProjectionSet { geom: geom.clone(), images })
}

/// Transpose of `forward_project`: every midpoint sample deposits
/// `pixel value * step weight` onto its trilinear neighbours.
pub fn backproject(
    p: &ProjectionSet,
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
    step: f64,
) -> Result<Volume> {
    check_step(step)?;
    p.validate()?;
    let mut out = Volume::zeros(dims, spacing, origin)?;
    let mut acc = vec![0.0f64; out.len()];
    let geom = &p.geom;
    let views: Vec<usize> = (0..geom.n_views).collect();
    for group in views.chunks(VIEW_GROUP) {
        let partials: Vec<Vec<f64>> = group
            .par_iter()
            .map(|&view| {
                let mut buf = vec![0.0f64; out.len()];
                let image = &p.images[view];
                for (pix, &value) in image.iter().enumerate() {
                    if value == 0.0 {
                        continue;
                    }
                    let ray = geom.ray_unchecked(view, pix / geom.detector_cols, pix % geom.detector_cols);
                    let value = value as f64;
                    for_each_midpoint(&ray, step, |pt, w| {
                        out.for_each_trilinear(pt, |idx, tw| buf[idx] += value * w * tw);
                    });
                }
                buf
            })
            .collect();
        for buf in partials {
            for (a, b) in acc.iter_mut().zip(buf) {
                *a += b;
            }
        }
    }
    out.data = acc.into_iter().map(|v| v as f32).collect();
    Ok(out)
}

/// Simulates photon-counting noise: `I = I0 exp(-q)` is replaced by a Poisson
/// draw and re-logged, with counts floored at one photon.
pub fn add_noise(p: &ProjectionSet, photon_count: f64, rng: &mut Prng) -> Result<ProjectionSet> {
    if !(photon_count > 0.0 && photon_count.is_finite()) {
        return Err(Error::invalid(format!("photon count must be > 0, got {photon_count}")));
    }
    let mut out = p.clone();
    for image in &mut out.images {
        for q in image.iter_mut() {
            let mean = photon_count * (-(*q as f64)).exp();
            let count = if mean > 0.0 {
                Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(0.0)
            } else {
                0.0
            };
            *q = (-(count.max(1.0) / photon_count).ln()) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_circular_geometry, Aabb};
    use crate::phantom::builtin_phantom;

    fn unit_cube(n: usize) -> Volume {
        let b = Aabb::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap();
        let mut v = Volume::covering(&b, [n; 3]).unwrap();
        v.data.fill(1.0);
        v
    }

    #[test]
    fn axis_and_diagonal_path_lengths() {
        // Clamp-free zero padding loses about half a voxel of mass at each
        // face; a fine lattice keeps that inside one step.
        let v = unit_cube(200);
        let step = 0.01;
        let b = v.bounds();
        let axis = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0)).clipped_to(&b);
        assert!((project_ray(&v, &axis, step) - 1.0).abs() <= step);
        let diag = Ray::new(Vec3::splat(-1.0), Vec3::splat(1.0)).clipped_to(&b);
        assert!((project_ray(&v, &diag, step) - 3f64.sqrt()).abs() <= 2.0 * step);
        let miss = Ray::new(Vec3::new(-1.0, 5.0, 0.5), Vec3::new(1.0, 0.0, 0.0)).clipped_to(&b);
        assert_eq!(project_ray(&v, &miss, step), 0.0);
    }

    #[test]
    fn partial_last_step_is_weighted() {
        let v = unit_cube(100);
        let b = v.bounds();
        let ray = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0)).clipped_to(&b);
        // 0.3 does not divide the unit length.
        let mut total = 0.0;
        let mut n = 0;
        for_each_midpoint(&ray, 0.3, |_, w| {
            total += w;
            n += 1;
        });
        assert_eq!(n, 4);
        assert!((total - 1.0).abs() < 1e-12);
    }

    fn small_geom(views: usize, det: usize) -> ScanGeometry {
        let b = Aabb::centered_cube(16.0);
        let pitch = ScanGeometry::covering_pitch(&b, 80.0, 160.0, det);
        make_circular_geometry(views, 80.0, 160.0, det, det, pitch, pitch, b).unwrap()
    }

    #[test]
    fn zero_and_scaled_volumes() {
        let g = small_geom(3, 8);
        let v = builtin_phantom("blocks", [16, 16, 16]).unwrap();
        let step = default_step(&v);
        let z = forward_project(&v.scaled(0.0), &g, step).unwrap();
        assert!(z.values().all(|x| x == 0.0));
        let p1 = forward_project(&v, &g, step).unwrap();
        let p2 = forward_project(&v.scaled(2.0), &g, step).unwrap();
        for (a, b) in p1.values().zip(p2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        assert!(p1.values().all(|x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn single_pixel_backprojection_stays_in_tube() {
        let g = small_geom(1, 9);
        let v = builtin_phantom("blocks", [16, 16, 16]).unwrap();
        let mut p = ProjectionSet::zeros(g.clone());
        p.images[0][4 * 9 + 4] = 1.0;
        let bp = backproject(&p, v.dims, v.spacing, v.origin, default_step(&v)).unwrap();
        let ray = g.ray_for_pixel(0, 4, 4).unwrap();
        let mut touched = 0;
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    let val = bp.get(i, j, k);
                    if val != 0.0 {
                        touched += 1;
                        let c = v.voxel_center(i, j, k) - ray.origin;
                        let perp = (c - ray.direction * c.dot(ray.direction)).norm();
                        assert!(perp <= 3f64.sqrt() * v.spacing.x + 1e-9);
                    }
                }
            }
        }
        assert!(touched > 0);
        let zero = backproject(&ProjectionSet::zeros(g), v.dims, v.spacing, v.origin, 0.5).unwrap();
        assert!(zero.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noise_limits_and_determinism() {
        let g = small_geom(1, 4);
        let mut p = ProjectionSet::filled(g, 1.0);
        let mut rng = Prng::new(5);
        let n = add_noise(&p, 1e9, &mut rng).unwrap();
        assert!(n.values().all(|q| ((q - 1.0) / 1.0).abs() < 1e-3));
        p.images[0].fill(0.0);
        let z = add_noise(&p, 1e6, &mut Prng::new(1)).unwrap();
        assert!(z.values().all(|q| q.abs() < 5e-3));
        let a = add_noise(&p, 100.0, &mut Prng::new(9)).unwrap();
        let b = add_noise(&p, 100.0, &mut Prng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(add_noise(&p, 0.0, &mut Prng::new(1)).is_err());
    }
}
