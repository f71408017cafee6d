//! Dense voxel volumes of attenuation coefficients.
//!
//! Values live at voxel centres; voxel `(i, j, k)` sits at
//! `origin + (i, j, k) * spacing`. Data is stored x-fastest.

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        Self::filled(dims, spacing, origin, 0.0)
    }

    pub fn filled(dims: [usize; 3], spacing: Vec3, origin: Vec3, value: f32) -> Result<Self> {
        check_layout(dims, spacing, origin)?;
        Ok(Self { dims, spacing, origin, data: vec![value; dims.iter().product()] })
    }

    pub fn from_data(dims: [usize; 3], spacing: Vec3, origin: Vec3, data: Vec<f32>) -> Result<Self> {
        check_layout(dims, spacing, origin)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::invalid(format!("volume data has {} values, dims need {n}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume data contains non-finite values"));
        }
        Ok(Self { dims, spacing, origin, data })
    }

    /// Volume whose voxels tile `bounds` exactly.
    pub fn covering(bounds: &Aabb, dims: [usize; 3]) -> Result<Self> {
        let (spacing, origin) = lattice_for_bounds(bounds, dims)?;
        Self::zeros(dims, spacing, origin)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64).mul_elem(self.spacing)
    }

    /// Box covered by the voxels (half a voxel beyond the outermost centres).
    pub fn bounds(&self) -> Aabb {
        let half = self.spacing * 0.5;
        let last = Vec3::new(
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        );
        Aabb { min: self.origin - half, max: self.origin + last.mul_elem(self.spacing) + half }
    }

    pub fn same_lattice(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn scaled(&self, s: f32) -> Volume {
        Volume { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    /// Trilinear interpolation between voxel centres with zero padding: the
    /// lattice is treated as surrounded by zero-valued voxels, so values fall
    /// off linearly over one voxel beyond the outermost centres.
    pub fn sample_trilinear(&self, p: Vec3) -> f64 {
        let mut acc = 0.0;
        self.for_each_trilinear(p, |idx, w| acc += w * self.data[idx] as f64);
        acc
    }

    /// Visits the in-range lattice neighbours of `p` with their trilinear weights.
    #[inline]
    pub fn for_each_trilinear(&self, p: Vec3, mut f: impl FnMut(usize, f64)) {
        let g = (p - self.origin).div_elem(self.spacing);
        let mut base = [0i64; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let ga = g[a];
            if !(ga > -1.0 && ga < self.dims[a] as f64) {
                return;
            }
            let fl = ga.floor();
            base[a] = fl as i64;
            frac[a] = ga - fl;
        }
        let [nx, ny, nz] = self.dims.map(|d| d as i64);
        for dz in 0..2i64 {
            let z = base[2] + dz;
            if z < 0 || z >= nz {
                continue;
            }
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2i64 {
                let y = base[1] + dy;
                if y < 0 || y >= ny {
                    continue;
                }
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2i64 {
                    let x = base[0] + dx;
                    if x < 0 || x >= nx {
                        continue;
                    }
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        f((x + nx * (y + ny * z)) as usize, w);
                    }
                }
            }
        }
    }
}

/// Spacing and first-centre origin for a lattice of `dims` voxels tiling `bounds`.
pub fn lattice_for_bounds(bounds: &Aabb, dims: [usize; 3]) -> Result<(Vec3, Vec3)> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("volume dims must be >= 1, got {dims:?}")));
    }
    let ext = bounds.extent();
    let spacing = Vec3::new(ext.x / dims[0] as f64, ext.y / dims[1] as f64, ext.z / dims[2] as f64);
    Ok((spacing, bounds.min + spacing * 0.5))
}

fn check_layout(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("volume dims must be >= 1, got {dims:?}")));
    }
    if !(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0) || !spacing.is_finite() {
        return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    if !origin.is_finite() {
        return Err(Error::invalid("volume origin must be finite"));
    }
    Ok(())
}
