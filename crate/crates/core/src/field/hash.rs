//! Multiresolution hash encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashEncoderConfig {
    pub levels: usize,
    /// log2 of the per-level table size.
    pub log2_table_size: u32,
    pub feats_per_level: usize,
    pub base_res: usize,
    pub growth: f64,
}

impl Default for HashEncoderConfig {
    fn default() -> Self {
        Self { levels: 8, log2_table_size: 16, feats_per_level: 2, base_res: 16, growth: 1.5 }
    }
}

impl HashEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.feats_per_level == 0 || self.base_res == 0 {
            return Err(Error::invalid("hash encoder levels, features and base resolution must be >= 1"));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 30 {
            return Err(Error::invalid("hash table size must be 2^1 ..= 2^30"));
        }
        if !(self.growth > 1.0) {
            return Err(Error::invalid("hash encoder growth factor must exceed 1"));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feats_per_level
    }

    /// Parameter count of all level tables.
    pub fn n_params(&self) -> usize {
        self.levels * self.table_size() * self.feats_per_level
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        (self.base_res as f64 * self.growth.powi(level as i32)).floor() as usize
    }
}

#[inline]
pub fn spatial_hash(c: [u64; 3], mask: u64) -> u64 {
    (c[0].wrapping_mul(PRIMES[0]) ^ c[1].wrapping_mul(PRIMES[1]) ^ c[2].wrapping_mul(PRIMES[2])) & mask
}

/// Table rows and blend weights of the 8 cell corners around one point at
/// one level. `rows[c]` is the flat parameter index of the corner's first
/// feature; corner `c` has offsets `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CornerSet {
    pub rows: [u32; 8],
    pub weights: [f64; 8],
}

pub fn corners(cfg: &HashEncoderConfig, level: usize, p: Vec3) -> CornerSet {
    let res = cfg.level_resolution(level) as f64;
    let t = cfg.table_size() as u64;
    let mask = t - 1;
    let mut base = [0u64; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let x = p[a].clamp(0.0, 1.0) * res;
        let fl = x.floor();
        base[a] = fl as u64;
        frac[a] = x - fl;
    }
    let level_offset = level as u64 * t;
    let mut out = CornerSet::default();
    for c in 0..8 {
        let off = [(c & 1) as u64, ((c >> 1) & 1) as u64, ((c >> 2) & 1) as u64];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        let h = spatial_hash([base[0] + off[0], base[1] + off[1], base[2] + off[2]], mask);
        out.rows[c] = ((level_offset + h) * cfg.feats_per_level as u64) as u32;
        out.weights[c] = w;
    }
    out
}

/// Encodes `p` (box-normalized, clamped to `[0,1]^3`) into `out`, which must
/// hold `levels * feats_per_level` values. Also returns the corner sets used.
pub fn encode_into(cfg: &HashEncoderConfig, tables: &[f64], p: Vec3, out: &mut [f64], used: &mut [CornerSet]) {
    let f = cfg.feats_per_level;
    for level in 0..cfg.levels {
        let cs = corners(cfg, level, p);
        let dst = &mut out[level * f..(level + 1) * f];
        dst.fill(0.0);
        for c in 0..8 {
            let w = cs.weights[c];
            let row = cs.rows[c] as usize;
            for (d, &v) in dst.iter_mut().zip(&tables[row..row + f]) {
                *d += w * v;
            }
        }
        used[level] = cs;
    }
}

/// Allocating convenience wrapper around [`encode_into`].
pub fn hash_encode(cfg: &HashEncoderConfig, tables: &[f64], p: Vec3) -> Vec<f64> {
    let mut out = vec![0.0; cfg.output_dim()];
    let mut used = vec![CornerSet::default(); cfg.levels];
    encode_into(cfg, tables, p, &mut out, &mut used);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> HashEncoderConfig {
        HashEncoderConfig { levels: 2, log2_table_size: 6, feats_per_level: 2, base_res: 4, growth: 2.0 }
    }

    fn tables(cfg: &HashEncoderConfig) -> Vec<f64> {
        (0..cfg.n_params()).map(|i| (i as f64 * 0.37).sin()).collect()
    }

    #[test]
    fn lattice_corner_returns_table_row() {
        let c = cfg();
        let t = tables(&c);
        // (0.25, 0.5, 0.75) is a lattice node at both resolutions 4 and 8.
        let p = Vec3::new(0.25, 0.5, 0.75);
        let out = hash_encode(&c, &t, p);
        for level in 0..2 {
            let res = c.level_resolution(level) as u64;
            let node = [res / 4, res / 2, 3 * res / 4];
            let h = spatial_hash(node, c.table_size() as u64 - 1);
            let row = ((level as u64 * c.table_size() as u64 + h) * 2) as usize;
            assert_eq!(&out[level * 2..level * 2 + 2], &t[row..row + 2]);
        }
    }

    #[test]
    fn cell_centre_blends_evenly() {
        let c = HashEncoderConfig { levels: 1, ..cfg() };
        let cs = corners(&c, 0, Vec3::new(0.125, 0.125, 0.125));
        assert!(cs.weights.iter().all(|&w| (w - 0.125).abs() < 1e-15));
        let cs = corners(&c, 0, Vec3::new(0.125, 0.0, 0.0));
        assert!((cs.weights[0] - 0.5).abs() < 1e-15 && (cs.weights[1] - 0.5).abs() < 1e-15);
        assert_eq!(cs.weights.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn same_cell_shares_rows() {
        let c = cfg();
        let a = corners(&c, 1, Vec3::new(0.51, 0.52, 0.53));
        let b = corners(&c, 1, Vec3::new(0.6, 0.55, 0.61));
        assert_eq!(a.rows, b.rows);
        assert_ne!(a.weights, b.weights);
    }

    #[test]
    fn level_resolutions_grow() {
        let c = HashEncoderConfig::default();
        assert_eq!(c.level_resolution(0), 16);
        assert_eq!(c.level_resolution(1), 24);
        assert_eq!(c.level_resolution(7), 273);
    }
}
