//! World-space primitives and the circular cone-beam scan geometry.
//!
//! Frame conventions: the isocenter sits at the centre of the volume bounds,
//! sources travel on a circle in the plane `z = isocenter.z`, and the flat
//! detector faces the source through the isocenter. The detector `u` axis is
//! tangent to the source circle (direction of increasing angle) and `v` runs
//! along `+z`. Column index grows along `+u`, row index along `+v`.

use std::ops::{Add, Div, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn splat(v: f64) -> Self {
        Self { x: v, y: v, z: v }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn div_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x / o.x, self.y / o.y, self.z / o.z)
    }

    pub fn min_elem(self) -> f64 {
        self.x.min(self.y).min(self.z)
    }

    pub fn max_elem(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::invalid("box corners must be finite"));
        }
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(Error::invalid(format!("box min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    /// Cube of half-width `half` centred on the origin.
    pub fn centered_cube(half: f64) -> Self {
        Self { min: Vec3::splat(-half), max: Vec3::splat(half) }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Maps a world point to `[0,1]^3` box-relative coordinates (unclamped).
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        (p - self.min).div_elem(self.extent())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    /// Builds a ray with a unit-normalized direction and an unbounded segment.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self { origin, direction: direction.normalized(), t_min: 0.0, t_max: f64::INFINITY }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn length(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn is_empty(&self) -> bool {
        !(self.t_max > self.t_min)
    }

    /// Restricts the ray to `bounds`; a miss collapses the segment to `[0, 0]`.
    pub fn clipped_to(mut self, bounds: &Aabb) -> Self {
        match ray_aabb_intersect(&self, bounds) {
            Some((near, far)) if far > 0.0 => {
                self.t_min = near.max(0.0);
                self.t_max = far;
            }
            _ => {
                self.t_min = 0.0;
                self.t_max = 0.0;
            }
        }
        self
    }
}

/// Slab test. Returns the parametric entry/exit of the infinite line with the
/// box, or `None` when they are disjoint. A zero direction component counts as
/// "inside that slab" iff the origin lies within it, so no infinities arise.
pub fn ray_aabb_intersect(ray: &Ray, bounds: &Aabb) -> Option<(f64, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        let (lo, hi) = (bounds.min[a], bounds.max[a]);
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut t0, mut t1) = ((lo - o) * inv, (hi - o) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near.is_finite() && t_far.is_finite() {
        Some((t_near, t_far))
    } else {
        // Zero direction vector: the "ray" is a point.
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub n_views: usize,
    pub source_to_isocenter: f64,
    pub source_to_detector: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch_u: f64,
    pub pixel_pitch_v: f64,
    /// Total angular coverage in radians; views are spaced `angular_range / n_views` apart.
    pub angular_range: f64,
    pub volume_bounds: Aabb,
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::invalid("n_views must be >= 1"));
        }
        if self.detector_rows == 0 || self.detector_cols == 0 {
            return Err(Error::invalid("detector rows and cols must be >= 1"));
        }
        if !(self.source_to_isocenter > 0.0) {
            return Err(Error::invalid("source_to_isocenter must be > 0"));
        }
        if !(self.source_to_detector > self.source_to_isocenter) {
            return Err(Error::invalid("source_to_detector must exceed source_to_isocenter"));
        }
        if !(self.pixel_pitch_u > 0.0 && self.pixel_pitch_v > 0.0) {
            return Err(Error::invalid("pixel pitches must be > 0"));
        }
        if !self.angular_range.is_finite() {
            return Err(Error::invalid("angular_range must be finite"));
        }
        Aabb::new(self.volume_bounds.min, self.volume_bounds.max)?;
        Ok(())
    }

    pub fn pixels_per_view(&self) -> usize {
        self.detector_rows * self.detector_cols
    }

    pub fn total_rays(&self) -> usize {
        self.n_views * self.pixels_per_view()
    }

    pub fn isocenter(&self) -> Vec3 {
        self.volume_bounds.center()
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        self.angular_range * view as f64 / self.n_views as f64
    }

    pub fn source_position(&self, view: usize) -> Vec3 {
        let (s, c) = self.view_angle(view).sin_cos();
        self.isocenter() + Vec3::new(c, s, 0.0) * self.source_to_isocenter
    }

    /// World-space centre of detector pixel `(row, col)` at `view`.
    pub fn pixel_center(&self, view: usize, row: usize, col: usize) -> Vec3 {
        let (s, c) = self.view_angle(view).sin_cos();
        let toward_source = Vec3::new(c, s, 0.0);
        let u_axis = Vec3::new(-s, c, 0.0);
        let v_axis = Vec3::new(0.0, 0.0, 1.0);
        let detector_center =
            self.isocenter() - toward_source * (self.source_to_detector - self.source_to_isocenter);
        let du = (col as f64 - (self.detector_cols as f64 - 1.0) * 0.5) * self.pixel_pitch_u;
        let dv = (row as f64 - (self.detector_rows as f64 - 1.0) * 0.5) * self.pixel_pitch_v;
        detector_center + u_axis * du + v_axis * dv
    }

    /// Ray from the view's source through the centre of detector pixel
    /// `(row, col)`, clipped to the volume bounds.
    pub fn ray_for_pixel(&self, view: usize, row: usize, col: usize) -> Result<Ray> {
        if view >= self.n_views {
            return Err(Error::invalid(format!("view {view} out of range (n_views = {})", self.n_views)));
        }
        if row >= self.detector_rows || col >= self.detector_cols {
            return Err(Error::invalid(format!(
                "pixel ({row}, {col}) outside {}x{} detector",
                self.detector_rows, self.detector_cols
            )));
        }
        Ok(self.ray_unchecked(view, row, col))
    }

    pub(crate) fn ray_unchecked(&self, view: usize, row: usize, col: usize) -> Ray {
        let src = self.source_position(view);
        let dst = self.pixel_center(view, row, col);
        Ray::new(src, dst - src).clipped_to(&self.volume_bounds)
    }

    /// Ray for a flat ray index `view * rows * cols + row * cols + col`.
    pub fn ray_at_index(&self, index: usize) -> Ray {
        let per_view = self.pixels_per_view();
        let view = index / per_view;
        let pix = index % per_view;
        self.ray_unchecked(view, pix / self.detector_cols, pix % self.detector_cols)
    }

    /// Detector pitch that makes a square `n`-pixel detector just cover the
    /// bounding sphere of `bounds` seen from `sid`, magnified to `sdd`.
    pub fn covering_pitch(bounds: &Aabb, sid: f64, sdd: f64, n: usize) -> f64 {
        let radius = bounds.extent().norm() * 0.5;
        let half_angle_tan = radius / (sid * sid - radius * radius).max(1e-12).sqrt();
        2.0 * sdd * half_angle_tan / n as f64
    }
}

/// Full-circle circular trajectory centred on `bounds`.
#[allow(clippy::too_many_arguments)]
pub fn make_circular_geometry(
    n_views: usize,
    sid: f64,
    sdd: f64,
    rows: usize,
    cols: usize,
    pitch_u: f64,
    pitch_v: f64,
    bounds: Aabb,
) -> Result<ScanGeometry> {
    let geom = ScanGeometry {
        n_views,
        source_to_isocenter: sid,
        source_to_detector: sdd,
        detector_rows: rows,
        detector_cols: cols,
        pixel_pitch_u: pitch_u,
        pixel_pitch_v: pitch_v,
        angular_range: std::f64::consts::TAU,
        volume_bounds: bounds,
    };
    geom.validate()?;
    Ok(geom)
}
