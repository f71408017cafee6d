//! Procedural ground-truth phantoms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::volume::{lattice_for_bounds, Volume};

/// Half-width in millimetres of the cube the built-in phantoms occupy.
pub const PHANTOM_HALF_WIDTH: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipsoid { center: Vec3, semi_axes: Vec3, rotation_z: f64, density_delta: f64 },
    Cuboid { min: Vec3, max: Vec3, density_delta: f64 },
}

impl Shape {
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Shape::Ellipsoid { center, semi_axes, rotation_z, .. } => {
                let d = p - center;
                let (s, c) = rotation_z.sin_cos();
                // Rotate into the ellipsoid frame (inverse rotation).
                let local = Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
                let q = local.div_elem(semi_axes);
                q.dot(q) <= 1.0
            }
            Shape::Cuboid { min, max, .. } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
        }
    }

    pub fn density_delta(&self) -> f64 {
        match *self {
            Shape::Ellipsoid { density_delta, .. } | Shape::Cuboid { density_delta, .. } => density_delta,
        }
    }
}

/// Additive composition of shapes inside `bounds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub bounds: Aabb,
    pub shapes: Vec<Shape>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for s in &self.shapes {
            if let Shape::Ellipsoid { semi_axes, .. } = s {
                if !(semi_axes.x > 0.0 && semi_axes.y > 0.0 && semi_axes.z > 0.0) {
                    return Err(Error::invalid(format!("ellipsoid semi-axes must be > 0, got {semi_axes:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn density_at(&self, p: Vec3) -> f64 {
        let sum: f64 = self.shapes.iter().filter(|s| s.contains(p)).map(Shape::density_delta).sum();
        sum.max(0.0)
    }
}

/// Voxelizes `spec` over its bounds: each voxel takes the summed deltas of
/// the shapes containing its centre, clamped at zero.
pub fn gen_phantom(spec: &PhantomSpec, dims: [usize; 3]) -> Result<Volume> {
    spec.validate()?;
    voxelize(&spec.bounds, dims, |p| spec.density_at(p))
}

pub fn voxelize(bounds: &Aabb, dims: [usize; 3], density: impl Fn(Vec3) -> f64) -> Result<Volume> {
    let (spacing, origin) = lattice_for_bounds(bounds, dims)?;
    let mut vol = Volume::zeros(dims, spacing, origin)?;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let idx = vol.index(i, j, k);
                vol.data[idx] = density(vol.voxel_center(i, j, k)) as f32;
            }
        }
    }
    Ok(vol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinPhantom {
    Jaw,
    Shepp3d,
    Blocks,
}

impl std::str::FromStr for BuiltinPhantom {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jaw" => Ok(BuiltinPhantom::Jaw),
            "shepp3d" => Ok(BuiltinPhantom::Shepp3d),
            "blocks" => Ok(BuiltinPhantom::Blocks),
            other => Err(Error::invalid(format!("unknown phantom '{other}' (expected jaw, shepp3d or blocks)"))),
        }
    }
}

pub fn builtin_bounds() -> Aabb {
    Aabb::centered_cube(PHANTOM_HALF_WIDTH)
}

pub fn builtin_phantom(name: &str, dims: [usize; 3]) -> Result<Volume> {
    let which: BuiltinPhantom = name.parse()?;
    let bounds = builtin_bounds();
    match which {
        BuiltinPhantom::Jaw => voxelize(&bounds, dims, |p| jaw_density(p / PHANTOM_HALF_WIDTH)),
        BuiltinPhantom::Shepp3d => gen_phantom(&shepp3d_spec(), dims),
        BuiltinPhantom::Blocks => gen_phantom(&blocks_spec(), dims),
    }
}

/// Three disjoint boxes of density 0.3, 0.6 and 1.0. Faces lie on multiples
/// of 1/8 of the half-width so the 16³, 32³ and 64³ lattices all resolve them
/// without partial voxels.
pub fn blocks_spec() -> PhantomSpec {
    let h = PHANTOM_HALF_WIDTH;
    let cuboid = |min: [f64; 3], max: [f64; 3], d: f64| Shape::Cuboid {
        min: Vec3::from_array(min) * h,
        max: Vec3::from_array(max) * h,
        density_delta: d,
    };
    PhantomSpec {
        bounds: builtin_bounds(),
        shapes: vec![
            cuboid([-0.75, -0.625, -0.5], [-0.125, 0.25, 0.5], 0.3),
            cuboid([0.125, -0.625, -0.375], [0.625, -0.125, 0.25], 0.6),
            cuboid([-0.375, 0.375, -0.25], [0.5, 0.75, 0.625], 1.0),
        ],
    }
}

/// Modified (high-contrast) 3D Shepp-Logan head: the classical ten
/// ellipsoids, rows of (delta, a, b, c, x0, y0, z0, phi in degrees) on the
/// unit cube.
pub const SHEPP3D_TABLE: [[f64; 8]; 10] = [
    [1.0, 0.6900, 0.920, 0.810, 0.0, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.780, 0.0, -0.0184, 0.0, 0.0],
    [-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0, 0.0, -18.0],
    [-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0, 0.0, 18.0],
    [0.1, 0.2100, 0.250, 0.410, 0.0, 0.35, -0.15, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.0, 0.1, 0.25, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.0, -0.1, 0.25, 0.0],
    [0.1, 0.0460, 0.023, 0.050, -0.08, -0.605, 0.0, 0.0],
    [0.1, 0.0230, 0.023, 0.020, 0.0, -0.606, 0.0, 0.0],
    [0.1, 0.0230, 0.046, 0.020, 0.06, -0.605, 0.0, 0.0],
];

pub fn shepp3d_spec() -> PhantomSpec {
    let h = PHANTOM_HALF_WIDTH;
    PhantomSpec {
        bounds: builtin_bounds(),
        shapes: SHEPP3D_TABLE
            .iter()
            .map(|r| Shape::Ellipsoid {
                center: Vec3::new(r[4], r[5], r[6]) * h,
                semi_axes: Vec3::new(r[1], r[2], r[3]) * h,
                rotation_z: r[7].to_radians(),
                density_delta: r[0],
            })
            .collect(),
    }
}

const JAW_TEETH: usize = 8;

/// Jaw-like scene on `[-1, 1]^3`: a U-shaped dense arch carrying eight
/// vertical tooth capsules, a low-density interior and a faint soft-tissue
/// shell. Later layers override earlier ones.
pub fn jaw_density(u: Vec3) -> f64 {
    let (ax, ay, y0) = (0.65, 0.75, -0.2);
    let in_slab = u.z.abs() <= 0.3;
    // Radial coordinate of the arch: elliptical above y0, straight arms below.
    let r = if u.y >= y0 {
        ((u.x / ax).powi(2) + ((u.y - y0) / ay).powi(2)).sqrt()
    } else {
        (u.x / ax).abs()
    };
    let in_jaw_extent = u.y >= -0.7;

    for i in 0..JAW_TEETH {
        let theta = (20.0 + 20.0 * i as f64).to_radians();
        let cx = ax * 0.86 * theta.cos();
        let cy = y0 + ay * 0.86 * theta.sin();
        let zc = u.z.clamp(-0.12, 0.22);
        let d2 = (u.x - cx).powi(2) + (u.y - cy).powi(2) + (u.z - zc).powi(2);
        if d2 <= 0.06 * 0.06 {
            return 1.0;
        }
    }
    if in_slab && in_jaw_extent {
        if (0.72..=1.0).contains(&r) {
            return 0.8;
        }
        if r < 0.72 {
            return 0.2;
        }
    }
    let shell = (u.x / 0.9).powi(2) + (u.y / 0.9).powi(2) + (u.z / 0.75).powi(2);
    if shell <= 1.0 {
        0.05
    } else {
        0.0
    }
}
