//! Ray-based dynamic attention density field.
//!
//! Sample points along one ray form a sequence. Each point is hash encoded
//! and projected to width `d`; every block adds a pointwise SiLU fusion
//! residual and then a multi-head self-attention residual across the
//! sequence; a linear head with softplus maps each position to a
//! non-negative density.
//!
//! All parameters live in one flat `Vec<f64>` described by [`Layout`]. The
//! reverse pass is hand-written against the activations stored in a
//! [`Tape`]; hash tables receive sparse gradients.

pub mod hash;
pub mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::rng::Prng;
use hash::CornerSet;
pub use hash::HashEncoderConfig;
use ops::{acc_colsum, acc_dy_wt, acc_xt_dy, add_bias, matmul, sigmoid, silu, silu_grad, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub encoder: HashEncoderConfig,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// When false the attention sub-layer of every block is skipped.
    pub use_attention: bool,
    /// Feed the ray-normalized sample parameter as one extra input channel.
    pub t_channel: bool,
    /// Restrict attention to samples in the same occupied interval.
    pub per_interval_attention: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoder: HashEncoderConfig::default(),
            width: 32,
            heads: 4,
            blocks: 2,
            use_attention: true,
            t_channel: false,
            per_interval_attention: false,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.width == 0 || self.heads == 0 {
            return Err(Error::invalid("field width and head count must be >= 1"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.output_dim() + usize::from(self.t_channel)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub fusion_w: usize,
    pub fusion_b: usize,
    pub query: usize,
    pub key: usize,
    pub value: usize,
    pub out: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tables: usize,
    pub input_w: usize,
    pub input_b: usize,
    pub blocks: Vec<BlockLayout>,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &FieldConfig) -> Self {
        let d = cfg.width;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let tables = take(cfg.encoder.n_params());
        let input_w = take(cfg.input_dim() * d);
        let input_b = take(d);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockLayout {
                fusion_w: take(d * d),
                fusion_b: take(d),
                query: take(d * d),
                key: take(d * d),
                value: take(d * d),
                out: take(d * d),
            })
            .collect();
        let head_w = take(d);
        let head_b = take(1);
        Layout { tables, input_w, input_b, blocks, head_w, head_b, total: off }
    }

    /// Named tensors in storage order: `(name, offset, shape)`.
    pub fn tensors(&self, cfg: &FieldConfig) -> Vec<(String, usize, Vec<usize>)> {
        let d = cfg.width;
        let e = &cfg.encoder;
        let mut t = vec![
            ("hash_tables".to_string(), self.tables, vec![e.levels, e.table_size(), e.feats_per_level]),
            ("input.weight".to_string(), self.input_w, vec![cfg.input_dim(), d]),
            ("input.bias".to_string(), self.input_b, vec![d]),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            t.push((format!("block{i}.fusion.weight"), b.fusion_w, vec![d, d]));
            t.push((format!("block{i}.fusion.bias"), b.fusion_b, vec![d]));
            t.push((format!("block{i}.attn.query"), b.query, vec![d, d]));
            t.push((format!("block{i}.attn.key"), b.key, vec![d, d]));
            t.push((format!("block{i}.attn.value"), b.value, vec![d, d]));
            t.push((format!("block{i}.attn.out"), b.out, vec![d, d]));
        }
        t.push(("head.weight".to_string(), self.head_w, vec![d]));
        t.push(("head.bias".to_string(), self.head_b, vec![1]));
        t
    }

    /// Start of the dense (non-table) parameters.
    pub fn dense_start(&self) -> usize {
        self.input_w
    }
}

/// One ray's worth of field inputs.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    /// Points in box-normalized coordinates.
    pub points: &'a [Vec3],
    /// Ray parameter of each point scaled to `[0, 1]`; used by the t channel.
    pub t_norm: Option<&'a [f64]>,
    /// Occupied-interval id of each point; used by per-interval attention.
    pub segments: Option<&'a [usize]>,
}

impl<'a> Sequence<'a> {
    pub fn points(points: &'a [Vec3]) -> Self {
        Self { points, t_norm: None, segments: None }
    }
}

#[derive(Debug, Clone, Default)]
struct BlockTape {
    input: Vec<f64>,
    fusion_pre: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head `n x n` attention weights.
    attn: Vec<f64>,
    mixed: Vec<f64>,
}

/// Activations of one sequence forward pass, sufficient for exact
/// reverse-mode gradients.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    n: usize,
    corners: Vec<CornerSet>,
    features: Vec<f64>,
    blocks: Vec<BlockTape>,
    final_hidden: Vec<f64>,
    head_pre: Vec<f64>,
    mask: Option<Vec<usize>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Gradient accumulator: dense parameters in full, hash tables as sparse
/// `(flat index, value)` contributions applied in recorded order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dense: Vec<f64>,
    pub table: Vec<(u32, f64)>,
}

impl Gradients {
    pub fn zeros(layout: &Layout) -> Self {
        Self { dense: vec![0.0; layout.total - layout.dense_start()], table: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.dense.fill(0.0);
        self.table.clear();
    }

    /// Adds this buffer into a flat gradient the size of the parameters.
    pub fn accumulate_into(&self, flat: &mut [f64], layout: &Layout) {
        for (g, &d) in flat[layout.dense_start()..].iter_mut().zip(&self.dense) {
            *g += d;
        }
        for &(i, v) in &self.table {
            flat[i as usize] += v;
        }
    }

    pub fn to_flat(&self, layout: &Layout) -> Vec<f64> {
        let mut flat = vec![0.0; layout.total];
        self.accumulate_into(&mut flat, layout);
        flat
    }

    /// Appends `other` after this buffer's contributions.
    pub fn merge(&mut self, other: &Gradients) {
        for (a, &b) in self.dense.iter_mut().zip(&other.dense) {
            *a += b;
        }
        self.table.extend_from_slice(&other.table);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdaField {
    pub config: FieldConfig,
    pub layout: Layout,
    /// Normalization box for query points.
    pub bounds: Aabb,
    pub params: Vec<f64>,
}

impl RdaField {
    /// Hash tables uniform in `[-1e-4, 1e-4]`, affine maps uniform in
    /// `+-1/sqrt(fan_in)`, head bias zero.
    pub fn new(config: FieldConfig, bounds: Aabb, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let uniform = |rng: &mut Prng, dst: &mut [f64], scale: f64| {
            for p in dst {
                *p = (2.0 * rng.uniform() - 1.0) * scale;
            }
        };
        let d = config.width;
        let n_tab = config.encoder.n_params();
        uniform(rng, &mut params[layout.tables..layout.tables + n_tab], 1e-4);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let in_dim = config.input_dim();
        uniform(rng, &mut params[layout.input_w..layout.input_w + in_dim * d], fan(in_dim));
        uniform(rng, &mut params[layout.input_b..layout.input_b + d], fan(in_dim));
        for b in &layout.blocks {
            uniform(rng, &mut params[b.fusion_w..b.fusion_w + d * d], fan(d));
            uniform(rng, &mut params[b.fusion_b..b.fusion_b + d], fan(d));
            for off in [b.query, b.key, b.value, b.out] {
                uniform(rng, &mut params[off..off + d * d], fan(d));
            }
        }
        uniform(rng, &mut params[layout.head_w..layout.head_w + d], fan(d));
        params[layout.head_b] = 0.0;
        Ok(Self { config, layout, bounds, params })
    }

    pub fn from_params(config: FieldConfig, bounds: Aabb, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::invalid(format!(
                "field expects {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, bounds, params })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Zeroes the head so every density is exactly `softplus(0) = ln 2`.
    pub fn zero_head(&mut self) {
        let d = self.config.width;
        self.params[self.layout.head_w..self.layout.head_w + d].fill(0.0);
        self.params[self.layout.head_b] = 0.0;
    }

    pub fn normalize(&self, p: Vec3) -> Vec3 {
        self.bounds.normalize(p)
    }

    /// Densities for one ray's sample points (box-normalized coordinates).
    pub fn query_densities(&self, points: &[Vec3], tape: Option<&mut Tape>) -> Vec<f64> {
        self.forward(&Sequence::points(points), tape)
    }

    /// Density at a single world-space point (a length-one sequence).
    pub fn density_at(&self, world: Vec3) -> f64 {
        let p = [self.normalize(world)];
        let t = [0.5];
        let seq = Sequence { points: &p, t_norm: Some(&t), segments: None };
        self.forward(&seq, None)[0]
    }

    pub fn forward(&self, seq: &Sequence, tape: Option<&mut Tape>) -> Vec<f64> {
        let mut local;
        let tape = match tape {
            Some(t) => t,
            None => {
                local = Tape::new();
                &mut local
            }
        };
        self.forward_recorded(seq, tape)
    }

    fn forward_recorded(&self, seq: &Sequence, tape: &mut Tape) -> Vec<f64> {
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let n = seq.points.len();
        let d = cfg.width;
        let enc_dim = cfg.encoder.output_dim();
        let in_dim = cfg.input_dim();
        let levels = cfg.encoder.levels;

        tape.n = n;
        tape.mask = if cfg.per_interval_attention { seq.segments.map(<[usize]>::to_vec) } else { None };
        tape.corners.resize(n * levels, CornerSet::default());
        tape.features.resize(n * in_dim, 0.0);
        let tables = &p[lay.tables..lay.tables + cfg.encoder.n_params()];
        for (i, &pt) in seq.points.iter().enumerate() {
            let row = &mut tape.features[i * in_dim..(i + 1) * in_dim];
            hash::encode_into(&cfg.encoder, tables, pt, &mut row[..enc_dim], &mut tape.corners[i * levels..(i + 1) * levels]);
            if cfg.t_channel {
                row[enc_dim] = seq.t_norm.map_or(0.5, |t| t[i]);
            }
        }

        let mut x = vec![0.0; n * d];
        matmul(&tape.features, &p[lay.input_w..lay.input_w + in_dim * d], n, in_dim, d, &mut x);
        add_bias(&mut x, &p[lay.input_b..lay.input_b + d]);

        tape.blocks.resize(lay.blocks.len(), BlockTape::default());
        for (bl, bt) in lay.blocks.iter().zip(tape.blocks.iter_mut()) {
            x = self.block_forward(bl, x, n, bt, tape.mask.as_deref());
        }

        let w = &p[lay.head_w..lay.head_w + d];
        let b = p[lay.head_b];
        tape.head_pre = x.chunks_exact(d).map(|row| ops::dot(row, w) + b).collect();
        tape.final_hidden = x;
        tape.head_pre.iter().map(|&s| softplus(s)).collect()
    }

    fn block_forward(&self, bl: &BlockLayout, x: Vec<f64>, n: usize, bt: &mut BlockTape, mask: Option<&[usize]>) -> Vec<f64> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.width;
        let mat = |off: usize| &p[off..off + d * d];

        bt.fusion_pre.resize(n * d, 0.0);
        matmul(&x, mat(bl.fusion_w), n, d, d, &mut bt.fusion_pre);
        add_bias(&mut bt.fusion_pre, &p[bl.fusion_b..bl.fusion_b + d]);
        let h1: Vec<f64> = x.iter().zip(&bt.fusion_pre).map(|(&xi, &a)| xi + silu(a)).collect();
        bt.input = x;

        if !cfg.use_attention {
            bt.h1 = h1.clone();
            return h1;
        }

        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for (buf, off) in [(&mut bt.q, bl.query), (&mut bt.k, bl.key), (&mut bt.v, bl.value)] {
            buf.resize(n * d, 0.0);
            matmul(&h1, mat(off), n, d, d, buf);
        }
        for buf in [&mut bt.q, &mut bt.k, &mut bt.v] {
            *buf = split_heads(buf, n, heads, hd);
        }
        bt.attn.resize(heads * n * n, 0.0);
        let mut mixed = vec![0.0; n * d];
        for h in 0..heads {
            let span = h * n * hd..(h + 1) * n * hd;
            let (qh, kh, vh) = (&bt.q[span.clone()], &bt.k[span.clone()], &bt.v[span.clone()]);
            let mh = &mut mixed[span];
            let a = &mut bt.attn[h * n * n..(h + 1) * n * n];
            for (i, ((qi, row), out)) in qh.chunks_exact(hd).zip(a.chunks_exact_mut(n)).zip(mh.chunks_exact_mut(hd)).enumerate() {
                let mut max = f64::NEG_INFINITY;
                for (r, kj) in row.iter_mut().zip(kh.chunks_exact(hd)) {
                    *r = ops::dot(qi, kj) * scale;
                }
                if let Some(m) = mask {
                    for (r, &mj) in row.iter_mut().zip(m) {
                        if mj != m[i] {
                            *r = f64::NEG_INFINITY;
                        }
                    }
                }
                for &r in row.iter() {
                    max = max.max(r);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                let inv = 1.0 / sum;
                for (r, vj) in row.iter_mut().zip(vh.chunks_exact(hd)) {
                    *r *= inv;
                    let w = *r;
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
        bt.mixed = merge_heads(&mixed, n, heads, hd);
        let mut h2 = vec![0.0; n * d];
        matmul(&bt.mixed, mat(bl.out), n, d, d, &mut h2);
        for (o, &r) in h2.iter_mut().zip(&h1) {
            *o += r;
        }
        bt.h1 = h1;
        h2
    }

    /// Reverse pass: `upstream[i]` is dLoss/dDensity for sample `i` of the
    /// recorded sequence. Gradients are added into `grads`.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grads: &mut Gradients) -> Result<()> {
        if upstream.len() != tape.n {
            return Err(Error::InvalidState(format!(
                "tape recorded {} samples but {} upstream gradients were given",
                tape.n,
                upstream.len()
            )));
        }
        if grads.dense.len() != self.layout.total - self.layout.dense_start() {
            return Err(Error::InvalidState("gradient buffer does not match this field".into()));
        }
        let n = tape.n;
        if n == 0 {
            return Ok(());
        }
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let d = cfg.width;
        let base = lay.dense_start();
        let g = &mut grads.dense;

        // Head.
        let ds: Vec<f64> = upstream.iter().zip(&tape.head_pre).map(|(&u, &s)| u * sigmoid(s)).collect();
        let w_head = &p[lay.head_w..lay.head_w + d];
        let mut dx = vec![0.0; n * d];
        for i in 0..n {
            let hrow = &tape.final_hidden[i * d..(i + 1) * d];
            let gw = &mut g[lay.head_w - base..lay.head_w - base + d];
            for ((gw, &h), (dxv, &w)) in gw.iter_mut().zip(hrow).zip(dx[i * d..(i + 1) * d].iter_mut().zip(w_head)) {
                *gw += ds[i] * h;
                *dxv = ds[i] * w;
            }
            g[lay.head_b - base] += ds[i];
        }

        for (bl, bt) in lay.blocks.iter().zip(&tape.blocks).rev() {
            dx = self.block_backward(bl, bt, n, dx, g, base);
        }

        // Input projection.
        let in_dim = cfg.input_dim();
        acc_xt_dy(&tape.features, &dx, n, in_dim, d, &mut g[lay.input_w - base..lay.input_w - base + in_dim * d]);
        acc_colsum(&dx, d, &mut g[lay.input_b - base..lay.input_b - base + d]);
        let mut dfeat = vec![0.0; n * in_dim];
        acc_dy_wt(&dx, &p[lay.input_w..lay.input_w + in_dim * d], n, in_dim, d, &mut dfeat);

        // Hash tables: each corner row receives weight * feature gradient.
        let levels = cfg.encoder.levels;
        let f = cfg.encoder.feats_per_level;
        grads.table.reserve(n * levels * 8 * f);
        for i in 0..n {
            for level in 0..levels {
                let cs = &tape.corners[i * levels + level];
                let df = &dfeat[i * in_dim + level * f..i * in_dim + (level + 1) * f];
                for c in 0..8 {
                    let w = cs.weights[c];
                    if w == 0.0 {
                        continue;
                    }
                    for (k, &dv) in df.iter().enumerate() {
                        grads.table.push((cs.rows[c] + lay.tables as u32 + k as u32, w * dv));
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        bl: &BlockLayout,
        bt: &BlockTape,
        n: usize,
        dout: Vec<f64>,
        g: &mut [f64],
        base: usize,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.width;
        let mat = |off: usize| &p[off..off + d * d];

        let mut dh1 = dout.clone();
        if cfg.use_attention {
            let heads = cfg.heads;
            let hd = cfg.head_dim();
            let scale = 1.0 / (hd as f64).sqrt();
            acc_xt_dy(&bt.mixed, &dout, n, d, d, &mut g[bl.out - base..bl.out - base + d * d]);
            let mut dmixed = vec![0.0; n * d];
            acc_dy_wt(&dout, mat(bl.out), n, d, d, &mut dmixed);
            let dmixed = split_heads(&dmixed, n, heads, hd);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut da = vec![0.0; n];
            for h in 0..heads {
                let span = h * n * hd..(h + 1) * n * hd;
                let (qh, kh, vh) = (&bt.q[span.clone()], &bt.k[span.clone()], &bt.v[span.clone()]);
                let (dqh, dkh, dvh) = (&mut dq[span.clone()], &mut dk[span.clone()], &mut dv[span.clone()]);
                let a = &bt.attn[h * n * n..(h + 1) * n * n];
                for (((dmi, arow), qi), dqi) in
                    dmixed[span].chunks_exact(hd).zip(a.chunks_exact(n)).zip(qh.chunks_exact(hd)).zip(dqh.chunks_exact_mut(hd))
                {
                    let mut weighted = 0.0;
                    for (((daj, &w), vj), dvj) in da.iter_mut().zip(arow).zip(vh.chunks_exact(hd)).zip(dvh.chunks_exact_mut(hd)) {
                        *daj = ops::dot(dmi, vj);
                        weighted += *daj * w;
                        if w != 0.0 {
                            for (x, &m) in dvj.iter_mut().zip(dmi) {
                                *x += w * m;
                            }
                        }
                    }
                    // Masked pairs carry zero weight and so zero logit gradient.
                    for (((&daj, &w), kj), dkj) in da.iter().zip(arow).zip(kh.chunks_exact(hd)).zip(dkh.chunks_exact_mut(hd)) {
                        let dlogit = w * (daj - weighted) * scale;
                        if dlogit == 0.0 {
                            continue;
                        }
                        for ((x, &kv), (y, &qv)) in dqi.iter_mut().zip(kj).zip(dkj.iter_mut().zip(qi)) {
                            *x += dlogit * kv;
                            *y += dlogit * qv;
                        }
                    }
                }
            }
            let (dq, dk, dv) = (merge_heads(&dq, n, heads, hd), merge_heads(&dk, n, heads, hd), merge_heads(&dv, n, heads, hd));
            for (dproj, off) in [(&dq, bl.query), (&dk, bl.key), (&dv, bl.value)] {
                acc_xt_dy(&bt.h1, dproj, n, d, d, &mut g[off - base..off - base + d * d]);
                acc_dy_wt(dproj, mat(off), n, d, d, &mut dh1);
            }
        }

        // h1 = x + silu(x W_f + b_f)
        let dpre: Vec<f64> = dh1.iter().zip(&bt.fusion_pre).map(|(&gh, &a)| gh * silu_grad(a)).collect();
        acc_xt_dy(&bt.input, &dpre, n, d, d, &mut g[bl.fusion_w - base..bl.fusion_w - base + d * d]);
        acc_colsum(&dpre, d, &mut g[bl.fusion_b - base..bl.fusion_b - base + d]);
        let mut dx = dh1;
        acc_dy_wt(&dpre, mat(bl.fusion_w), n, d, d, &mut dx);
        dx
    }

    /// Attention weights of head `head` in block `block` from a recorded tape.
    pub fn attention_weights(tape: &Tape, block: usize, head: usize) -> Option<&[f64]> {
        let n = tape.n;
        let bt = tape.blocks.get(block)?;
        bt.attn.get(head * n * n..(head + 1) * n * n)
    }
}

/// `n x (heads*hd)` row-major to `heads x n x hd`.
fn split_heads(x: &[f64], n: usize, heads: usize, hd: usize) -> Vec<f64> {
    let d = heads * hd;
    let mut out = vec![0.0; n * d];
    for (i, row) in x.chunks_exact(d).enumerate() {
        for (h, part) in row.chunks_exact(hd).enumerate() {
            out[(h * n + i) * hd..(h * n + i + 1) * hd].copy_from_slice(part);
        }
    }
    out
}

fn merge_heads(x: &[f64], n: usize, heads: usize, hd: usize) -> Vec<f64> {
    let d = heads * hd;
    let mut out = vec![0.0; n * d];
    for (hi, part) in x.chunks_exact(hd).enumerate() {
        let (h, i) = (hi / n, hi % n);
        out[i * d + h * hd..i * d + (h + 1) * hd].copy_from_slice(part);
    }
    out
}
