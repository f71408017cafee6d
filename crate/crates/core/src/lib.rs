//! Sparse-view cone-beam CT reconstruction.
//!
//! Forward X-ray projection and phantoms provide data, an occupancy-guided
//! hybrid ray sampler feeds a hash-encoded density field with per-ray
//! self-attention, and a SART baseline plus PSNR/SSIM/IoU/Dice metrics
//! score the results.

pub mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod rng;
pub mod sampler;
pub mod sart;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{make_circular_geometry, ray_aabb_intersect, Aabb, Ray, ScanGeometry, Vec3};
pub use projector::ProjectionSet;
pub use rng::Prng;
pub use volume::Volume;
