//! Pointwise feature enrichment and the dual-branch attention encoder.
//!
//! Every point gets a structural row (its cell embedding) and a spatial row
//! `(x, y, r, l)`: standardized coordinates, the interior turning angle and
//! the mean adjacent segment length. Both get a sinusoidal position encoding
//! and feed a stack of layers whose attention fuses a structural and a
//! spatial attention matrix per head as `A_t + γ·A_s`.
//!
//! Cost per forward is `O(l² · d · L)` for sequence length `l`, width `d`
//! and `L` layers; the attention matrices dominate once `l > d`.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binfmt::Checkpoint;
use crate::error::{Error, Result};
use crate::geo::{Point, Trajectory};
use crate::grid::{CellEmbeddingTable, Grid};
use crate::numerics::{Graph, Mask, Real, Tensor, Var};

/// Width of the raw spatial tuple `(x, y, r, l)`.
pub const SPATIAL_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_t: usize,
    /// Spatial branch width. 4 keeps the raw tuple; anything wider adds a
    /// learned input projection from the 4 raw features.
    pub d_s: usize,
    pub heads: usize,
    pub heads_s: usize,
    pub layers: usize,
    pub spatial_sublayers: usize,
    pub mlp_expansion: usize,
    pub dropout: f64,
    pub l_max: usize,
    /// Divisor applied to the mean segment length, in meters.
    pub length_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_t: 256,
            d_s: 4,
            heads: 4,
            heads_s: 4,
            layers: 2,
            spatial_sublayers: 2,
            mlp_expansion: 4,
            dropout: 0.1,
            l_max: 200,
            length_scale: 100.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.d_t == 0 || self.heads == 0 || self.d_t % self.heads != 0 {
            return bad(format!("d_t={} must be a positive multiple of heads={}", self.d_t, self.heads));
        }
        if self.d_t % 2 != 0 {
            return bad(format!("d_t={} must be even for the projection head", self.d_t));
        }
        if self.d_s < SPATIAL_FEATURES || self.heads_s == 0 || self.d_s % self.heads_s != 0 {
            return bad(format!(
                "d_s={} must be >= 4 and a multiple of heads_s={}",
                self.d_s, self.heads_s
            ));
        }
        if self.heads_s != self.heads {
            return bad(format!(
                "heads_s={} must equal heads={}: attention is fused per head",
                self.heads_s, self.heads
            ));
        }
        if self.layers == 0 || self.spatial_sublayers == 0 || self.mlp_expansion == 0 {
            return bad("layers, spatial_sublayers and mlp_expansion must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.l_max < 2 {
            return bad("l_max must be at least 2".into());
        }
        if !(self.length_scale > 0.0) {
            return bad(format!("length_scale must be positive, got {}", self.length_scale));
        }
        Ok(())
    }

    pub fn d_proj(&self) -> usize {
        self.d_t / 2
    }
}

/// Dataset constants that map projected meters into the spatial features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub length_scale: f64,
}

impl Standardization {
    /// Point mean and standard deviation over a (training) split.
    pub fn fit(trajs: &[Trajectory], length_scale: f64) -> Result<Self> {
        let n: usize = trajs.iter().map(Trajectory::len).sum();
        if n == 0 {
            return Err(Error::input("cannot standardize an empty dataset"));
        }
        let pts = || trajs.iter().flat_map(|t| t.points.iter());
        let nf = n as f64;
        let mean_x = pts().map(|p| p.x).sum::<f64>() / nf;
        let mean_y = pts().map(|p| p.y).sum::<f64>() / nf;
        let sx = (pts().map(|p| (p.x - mean_x).powi(2)).sum::<f64>() / nf).sqrt();
        let sy = (pts().map(|p| (p.y - mean_y).powi(2)).sum::<f64>() / nf).sqrt();
        let guard = |s: f64| if s > 1e-9 { s } else { 1.0 };
        Ok(Standardization {
            mean_x,
            mean_y,
            std_x: guard(sx),
            std_y: guard(sy),
            length_scale,
        })
    }

    pub fn identity() -> Self {
        Standardization {
            mean_x: 0.0,
            mean_y: 0.0,
            std_x: 1.0,
            std_y: 1.0,
            length_scale: 1.0,
        }
    }
}

/// Interior angle at `b` between `a-b` and `c-b`, in `[0, π]`. A zero-length
/// leg counts as straight.
pub fn interior_angle(a: &Point, b: &Point, c: &Point) -> f64 {
    let (ux, uy) = (a.x - b.x, a.y - b.y);
    let (vx, vy) = (c.x - b.x, c.y - b.y);
    let nu = ux.hypot(uy);
    let nv = vx.hypot(vy);
    if nu == 0.0 || nv == 0.0 {
        return PI;
    }
    ((ux * vx + uy * vy) / (nu * nv)).clamp(-1.0, 1.0).acos()
}

/// Raw spatial tuples `(x, y, r, l)` before standardization, one per point.
/// Endpoints use `r = π` and the single adjacent segment length.
pub fn spatial_tuples(points: &[Point]) -> Result<Vec<[f64; 4]>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::input(format!("spatial features need >= 2 points, got {n}")));
    }
    Ok((0..n)
        .map(|i| {
            let p = &points[i];
            let (r, l) = if i == 0 {
                (PI, p.distance(&points[1]))
            } else if i == n - 1 {
                (PI, p.distance(&points[n - 2]))
            } else {
                let (a, c) = (&points[i - 1], &points[i + 1]);
                (interior_angle(a, p, c), (p.distance(a) + p.distance(c)) / 2.0)
            };
            [p.x, p.y, r, l]
        })
        .collect())
}

/// Structural and spatial rows of one trajectory, without position encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Enriched {
    pub len: usize,
    pub t_struct: Vec<f32>,
    pub s_spatial: Vec<f32>,
}

/// Cell embedding rows plus standardized spatial rows. Cells inside the grid
/// but absent from the table (never touched during grid building) map to a
/// zero vector.
pub fn enrich(traj: &Trajectory, grid: &Grid, cells: &CellEmbeddingTable, st: &Standardization) -> Result<Enriched> {
    traj.require_len(2, "enrich")?;
    let d = cells.dim;
    let mut t_struct = Vec::with_capacity(traj.len() * d);
    for p in &traj.points {
        let id = grid.cell_of(p)?;
        match cells.lookup(id) {
            Some(row) => t_struct.extend_from_slice(row),
            None => t_struct.extend(std::iter::repeat_n(0.0, d)),
        }
    }
    let s_spatial = spatial_tuples(&traj.points)?
        .into_iter()
        .flat_map(|[x, y, r, l]| {
            [
                (x - st.mean_x) / st.std_x,
                (y - st.mean_y) / st.std_y,
                r,
                l / st.length_scale,
            ]
        })
        .map(|v| v as f32)
        .collect();
    Ok(Enriched {
        len: traj.len(),
        t_struct,
        s_spatial,
    })
}

/// Sinusoidal encoding value for 0-based position `i`, column `j`, width `d`.
pub fn position_encoding(i: usize, j: usize, d: usize) -> f64 {
    let even = j - (j % 2);
    let angle = i as f64 / 10000f64.powf(even as f64 / d as f64);
    if j % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Adds the encoding to the first `rows` rows of a row-major `? x d` block.
pub fn add_position_encoding<F: Real>(m: &mut [F], rows: usize, d: usize) {
    for i in 0..rows {
        for j in 0..d {
            m[i * d + j] = m[i * d + j] + F::of(position_encoding(i, j, d));
        }
    }
}

/// Padded batch of enriched trajectories. Padded rows are zero and invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<F: Real = f32> {
    /// `batch x l x d_t`
    pub t_struct: Tensor<F>,
    /// `batch x l x 4`
    pub s_spatial: Tensor<F>,
    pub mask: Mask,
    pub lengths: Vec<usize>,
}

impl<F: Real> FeatureBatch<F> {
    /// Pads to `l` (at least the longest member) rows.
    pub fn from_enriched(items: &[&Enriched], d_t: usize, l: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::input("empty feature batch"));
        }
        let longest = items.iter().map(|e| e.len).max().unwrap_or(0);
        if l < longest {
            return Err(Error::input(format!("pad length {l} shorter than sequence {longest}")));
        }
        let b = items.len();
        let mut t = vec![F::zero(); b * l * d_t];
        let mut s = vec![F::zero(); b * l * SPATIAL_FEATURES];
        for (k, e) in items.iter().enumerate() {
            if e.t_struct.len() != e.len * d_t {
                return Err(Error::Shape {
                    op: "feature batch",
                    lhs: vec![e.len, d_t],
                    rhs: vec![e.t_struct.len()],
                });
            }
            for (o, &v) in t[k * l * d_t..].iter_mut().zip(&e.t_struct) {
                *o = F::of(v as f64);
            }
            for (o, &v) in s[k * l * SPATIAL_FEATURES..].iter_mut().zip(&e.s_spatial) {
                *o = F::of(v as f64);
            }
        }
        let lengths: Vec<usize> = items.iter().map(|e| e.len).collect();
        Ok(FeatureBatch {
            t_struct: Tensor::new(vec![b, l, d_t], t)?,
            s_spatial: Tensor::new(vec![b, l, SPATIAL_FEATURES], s)?,
            mask: Mask::from_lengths(&lengths, l),
            lengths,
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.mask.n
    }
}

/// Named parameter tensors in a fixed creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::input("parameter names and tensors differ in count"));
        }
        let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        if index.len() != names.len() {
            return Err(Error::input("duplicate parameter name"));
        }
        Ok(ParamSet { names, tensors, index })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape == b.shape)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

struct Builder<'a, R: Rng> {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor<f32>) {
        self.names.push(name);
        self.tensors.push(t);
    }

    fn matrix(&mut self, name: String, i: usize, o: usize) {
        let t = Tensor::xavier(i, o, self.rng);
        self.push(name, t);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for w in ["wq", "wk", "wv", "wo"] {
            self.matrix(format!("{prefix}.{w}"), d, d);
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0));
        self.push(format!("{prefix}.bias"), Tensor::zeros(&[d]));
    }

    fn mlp(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.matrix(format!("{prefix}.w1"), d, hidden);
        self.push(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        self.matrix(format!("{prefix}.w2"), hidden, d);
        self.push(format!("{prefix}.b2"), Tensor::zeros(&[d]));
    }
}

/// Freshly initialized encoder weights: Xavier-uniform matrices, unit
/// layer-norm gains, zero biases and `γ = 1` per layer.
pub fn init_params(cfg: &EncoderConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: &mut rng,
    };
    let (dt, ds, x) = (cfg.d_t, cfg.d_s, cfg.mlp_expansion);
    if ds != SPATIAL_FEATURES {
        b.matrix("spatial_in.w".into(), SPATIAL_FEATURES, ds);
        b.push("spatial_in.b".into(), Tensor::zeros(&[ds]));
    }
    for i in 0..cfg.layers {
        for j in 0..cfg.spatial_sublayers {
            let p = format!("layers.{i}.spatial.{j}");
            b.attention(&format!("{p}.attn"), ds);
            b.norm(&format!("{p}.ln1"), ds);
            b.mlp(&format!("{p}.mlp"), ds, ds * x);
            b.norm(&format!("{p}.ln2"), ds);
        }
        let p = format!("layers.{i}");
        b.attention(&format!("{p}.attn"), dt);
        b.push(format!("{p}.gamma"), Tensor::scalar(1.0));
        b.norm(&format!("{p}.ln1"), dt);
        b.mlp(&format!("{p}.mlp"), dt, dt * x);
        b.norm(&format!("{p}.ln2"), dt);
    }
    b.matrix("proj.w1".into(), dt, dt);
    b.push("proj.b1".into(), Tensor::zeros(&[dt]));
    b.matrix("proj.w2".into(), dt, cfg.d_proj());
    b.push("proj.b2".into(), Tensor::zeros(&[cfg.d_proj()]));
    ParamSet::new(b.names, b.tensors)
}

/// Parameters placed on a graph, looked up by name during the forward pass.
pub struct Bound<'a> {
    pub vars: Vec<Var>,
    params: &'a ParamSet,
}

impl Bound<'_> {
    /// Registers every tensor; those for which `trainable(name)` holds become
    /// differentiable leaves, the rest constants.
    pub fn new<'a, F: Real>(g: &mut Graph<F>, params: &'a ParamSet, trainable: impl Fn(&str) -> bool) -> Bound<'a> {
        let vars = params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| {
                let t: Tensor<F> = t.cast();
                if trainable(n) {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Bound { vars, params }
    }

    /// Registers pre-cast tensors (gradient checks in `f64`).
    pub fn with_vars(params: &ParamSet, vars: Vec<Var>) -> Bound<'_> {
        Bound { vars, params }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }
}

/// Per-call context: train flag and RNG for dropout.
pub struct Ctx<'r, R: Rng> {
    pub train: bool,
    pub dropout: f64,
    pub rng: &'r mut R,
}

fn linear_no_bias<F: Real>(g: &mut Graph<F>, x: Var, w: Var) -> Result<Var> {
    g.matmul(x, w)
}

pub(crate) fn linear<F: Real>(g: &mut Graph<F>, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = g.matmul(x, p.var(w)?)?;
    g.add_bias(y, p.var(b)?)
}

fn layer_norm<F: Real>(g: &mut Graph<F>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    g.layer_norm(x, p.var(&format!("{prefix}.gain"))?, p.var(&format!("{prefix}.bias"))?)
}

/// Attention probabilities `softmax(Q Kᵀ / √e)` per head: `[B*h, l, l]`,
/// plus the split value heads `[B*h, l, e]`.
fn attention_heads<F: Real>(
    g: &mut Graph<F>,
    p: &Bound,
    x: Var,
    prefix: &str,
    heads: usize,
    mask: &Mask,
) -> Result<(Var, Var)> {
    let q = linear_no_bias(g, x, p.var(&format!("{prefix}.wq"))?)?;
    let k = linear_no_bias(g, x, p.var(&format!("{prefix}.wk"))?)?;
    let v = linear_no_bias(g, x, p.var(&format!("{prefix}.wv"))?)?;
    let d = *g.shape(q).last().unwrap();
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let kt = g.transpose_last2(kh)?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    let a = g.softmax_last_dim(scores, Some(mask))?;
    Ok((a, vh))
}

/// `merge(A V) W_o`.
fn attend_out<F: Real>(g: &mut Graph<F>, p: &Bound, a: Var, vh: Var, prefix: &str, heads: usize) -> Result<Var> {
    let c = g.bmm(a, vh)?;
    let c = g.merge_heads(c, heads)?;
    linear_no_bias(g, c, p.var(&format!("{prefix}.wo"))?)
}

/// `LN(x + Dropout(c))` then `LN(h + Dropout(MLP(h)))`.
fn residual_block<F: Real, R: Rng>(
    g: &mut Graph<F>,
    p: &Bound,
    x: Var,
    c: Var,
    prefix: &str,
    ctx: &mut Ctx<'_, R>,
) -> Result<Var> {
    let c = g.dropout(c, ctx.dropout, ctx.rng, ctx.train)?;
    let h = g.add(x, c)?;
    let h = layer_norm(g, p, h, &format!("{prefix}.ln1"))?;
    let m = linear(g, p, h, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
    let m = g.relu(m);
    let m = linear(g, p, m, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
    let m = g.dropout(m, ctx.dropout, ctx.rng, ctx.train)?;
    let h2 = g.add(h, m)?;
    layer_norm(g, p, h2, &format!("{prefix}.ln2"))
}

/// Intermediate values of one fused attention layer.
pub struct DualMsmOut {
    /// Fused output `C_ts`, `[B, l, d_t]`.
    pub c_ts: Var,
    /// Structural attention `A_t`, `[B*h, l, l]`.
    pub a_t: Var,
    /// Spatial attention of the last spatial sublayer, `[B*h, l, l]`.
    pub a_s: Var,
    /// Spatial branch state after its sublayer stack, `[B, l, d_s]`.
    pub h_s: Var,
}

/// Fused attention of layer `layer`: the spatial branch runs its sublayer
/// stack over `s`, and its last attention matrix joins the structural one
/// as `A_t + γ·A_s` before multiplying the structural values.
pub fn dual_msm<F: Real, R: Rng>(
    g: &mut Graph<F>,
    cfg: &EncoderConfig,
    p: &Bound,
    t: Var,
    s: Var,
    mask: &Mask,
    layer: usize,
    ctx: &mut Ctx<'_, R>,
) -> Result<DualMsmOut> {
    let mut h_s = s;
    let mut a_s = None;
    for j in 0..cfg.spatial_sublayers {
        let prefix = format!("layers.{layer}.spatial.{j}");
        let (a, vh) = attention_heads(g, p, h_s, &format!("{prefix}.attn"), cfg.heads_s, mask)?;
        let c = attend_out(g, p, a, vh, &format!("{prefix}.attn"), cfg.heads_s)?;
        h_s = residual_block(g, p, h_s, c, &prefix, ctx)?;
        a_s = Some(a);
    }
    let a_s = a_s.expect("at least one spatial sublayer");
    let prefix = format!("layers.{layer}.attn");
    let (a_t, vh) = attention_heads(g, p, t, &prefix, cfg.heads, mask)?;
    let weighted = g.scale_by(a_s, p.var(&format!("layers.{layer}.gamma"))?)?;
    let fused = g.add(a_t, weighted)?;
    let c_ts = attend_out(g, p, fused, vh, &prefix, cfg.heads)?;
    Ok(DualMsmOut { c_ts, a_t, a_s, h_s })
}

/// Graph outputs of one encoder pass.
pub struct EncodeOut {
    /// Pooled trajectory embeddings `[B, d_t]`.
    pub h: Var,
    /// Projections `[B, d_t/2]`.
    pub z: Var,
    /// Final layer rows before pooling `[B, l, d_t]`.
    pub rows: Var,
    /// Per-layer fused-attention internals.
    pub layers: Vec<DualMsmOut>,
}

fn position_constant<F: Real>(b: usize, l: usize, d: usize, lengths: &[usize]) -> Tensor<F> {
    let mut data = vec![F::zero(); b * l * d];
    for (k, &len) in lengths.iter().enumerate() {
        add_position_encoding(&mut data[k * l * d..(k + 1) * l * d], len, d);
    }
    Tensor {
        shape: vec![b, l, d],
        data,
    }
}

// zero out padded rows of a [B, l, d] node so they stay exact zeros
fn row_mask_constant<F: Real>(mask: &Mask, d: usize) -> Tensor<F> {
    let data = mask
        .valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { F::one() } else { F::zero() }, d))
        .collect();
    Tensor {
        shape: vec![mask.groups, mask.n, d],
        data,
    }
}

/// Full forward: position encoding, stacked fused-attention layers, masked
/// mean pooling into `h`, projection head `FC ∘ ReLU ∘ FC` into `z`.
pub fn encode_graph<F: Real, R: Rng>(
    g: &mut Graph<F>,
    cfg: &EncoderConfig,
    p: &Bound,
    batch: &FeatureBatch<F>,
    ctx: &mut Ctx<'_, R>,
) -> Result<EncodeOut> {
    let (b, l) = (batch.batch(), batch.seq_len());
    if batch.t_struct.shape != [b, l, cfg.d_t] {
        return Err(Error::Shape {
            op: "encode",
            lhs: batch.t_struct.shape.clone(),
            rhs: vec![b, l, cfg.d_t],
        });
    }
    if l > cfg.l_max {
        return Err(Error::input(format!("sequence length {l} exceeds l_max {}", cfg.l_max)));
    }
    if batch.lengths.iter().any(|&n| n == 0) {
        return Err(Error::input("fully masked sequence in batch"));
    }
    let t0 = g.constant(batch.t_struct.clone());
    let pe_t = g.constant(position_constant(b, l, cfg.d_t, &batch.lengths));
    let mut t = g.add(t0, pe_t)?;

    let s0 = g.constant(batch.s_spatial.clone());
    let s_in = if cfg.d_s != SPATIAL_FEATURES {
        let y = linear(g, p, s0, "spatial_in.w", "spatial_in.b")?;
        let keep = g.constant(row_mask_constant(&batch.mask, cfg.d_s));
        g.mul(y, keep)?
    } else {
        s0
    };
    let pe_s = g.constant(position_constant(b, l, cfg.d_s, &batch.lengths));
    let mut s = g.add(s_in, pe_s)?;

    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let out = dual_msm(g, cfg, p, t, s, &batch.mask, i, ctx)?;
        t = residual_block(g, p, t, out.c_ts, &format!("layers.{i}"), ctx)?;
        s = out.h_s;
        layers.push(out);
    }
    let h = g.mean_pool_rows(t, &batch.mask)?;
    let z = linear(g, p, h, "proj.w1", "proj.b1")?;
    let z = g.relu(z);
    let z = linear(g, p, z, "proj.w2", "proj.b2")?;
    Ok(EncodeOut { h, z, rows: t, layers })
}

/// Eval-or-train forward without gradients; returns `(h, z)` as `[B, d]` tensors.
pub fn encode<R: Rng>(
    cfg: &EncoderConfig,
    params: &ParamSet,
    batch: &FeatureBatch<f32>,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, params, |_| false);
    let mut ctx = Ctx {
        train,
        dropout: cfg.dropout,
        rng,
    };
    let out = encode_graph(&mut g, cfg, &p, batch, &mut ctx)?;
    Ok((g.value(out.h).clone(), g.value(out.z).clone()))
}

/// Everything needed to turn raw trajectories into embeddings.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: EncoderConfig,
    pub grid: Grid,
    pub cells: CellEmbeddingTable,
    pub standardization: Standardization,
    pub params: ParamSet,
}

impl Model {
    pub fn new(
        config: EncoderConfig,
        grid: Grid,
        cells: CellEmbeddingTable,
        standardization: Standardization,
    ) -> Result<Model> {
        config.validate()?;
        if cells.dim != config.d_t {
            return Err(Error::config(format!(
                "cell embedding width {} differs from d_t {}",
                cells.dim, config.d_t
            )));
        }
        let params = init_params(&config)?;
        Ok(Model {
            config,
            grid,
            cells,
            standardization,
            params,
        })
    }

    pub fn enrich(&self, t: &Trajectory) -> Result<Enriched> {
        if t.len() > self.config.l_max {
            return Err(Error::input(format!(
                "trajectory '{}' has {} points, above l_max {}",
                t.id,
                t.len(),
                self.config.l_max
            )));
        }
        enrich(t, &self.grid, &self.cells, &self.standardization)
    }

    pub fn batch(&self, items: &[&Enriched]) -> Result<FeatureBatch<f32>> {
        let l = items.iter().map(|e| e.len).max().unwrap_or(0);
        FeatureBatch::from_enriched(items, self.config.d_t, l)
    }

    /// Eval-mode embeddings `h` of every trajectory, in input order. Batches
    /// run in parallel; results do not depend on the batch split.
    pub fn embed(&self, trajs: &[Trajectory], batch_size: usize) -> Result<Vec<Vec<f32>>> {
        self.embed_with(&self.params, trajs, batch_size)
    }

    pub fn embed_with(&self, params: &ParamSet, trajs: &[Trajectory], batch_size: usize) -> Result<Vec<Vec<f32>>> {
        let enriched: Vec<Enriched> = trajs.iter().map(|t| self.enrich(t)).collect::<Result<_>>()?;
        let refs: Vec<&Enriched> = enriched.iter().collect();
        let chunks: Vec<Vec<Vec<f32>>> = refs
            .par_chunks(batch_size.max(1))
            .map(|chunk| {
                let batch = self.batch(chunk)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (h, _) = encode(&self.config, params, &batch, false, &mut rng)?;
                Ok((0..h.rows()).map(|r| h.row(r).to_vec()).collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// JSON metadata of a model checkpoint. Tensors are stored as
/// `encoder.<name>` plus `cells.table`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub encoder: EncoderConfig,
    pub grid: Grid,
    pub standardization: Standardization,
    pub cell_ids: Vec<u64>,
}

impl Model {
    pub fn to_checkpoint(&self, kind: &str) -> Result<Checkpoint> {
        let meta = ModelMeta {
            kind: kind.to_string(),
            encoder: self.config.clone(),
            grid: self.grid.clone(),
            standardization: self.standardization,
            cell_ids: self.cells.ids.clone(),
        };
        let mut ck = Checkpoint::new(&meta)?;
        for (n, t) in self.params.names.iter().zip(&self.params.tensors) {
            ck.push(format!("encoder.{n}"), t.clone());
        }
        ck.push(
            "cells.table",
            Tensor::new(vec![self.cells.len(), self.cells.dim], self.cells.data.clone())?,
        );
        Ok(ck)
    }

    /// Rebuilds the model; parameter names and shapes must match a fresh
    /// initialization of the stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        meta.encoder.validate()?;
        let table = ck
            .tensor("cells.table")
            .ok_or_else(|| Error::Format("checkpoint lacks cells.table".into()))?;
        let cells = CellEmbeddingTable::new(meta.cell_ids.clone(), table.last_dim(), table.data.clone())?;
        let template = init_params(&meta.encoder)?;
        let stored = ck.with_prefix("encoder.");
        let mut tensors = Vec::with_capacity(template.len());
        for (name, t) in template.names.iter().zip(&template.tensors) {
            let found = stored
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter '{name}'")))?;
            if found.1.shape != t.shape {
                return Err(Error::Format(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    found.1.shape, t.shape
                )));
            }
            tensors.push(found.1.clone());
        }
        let mut model = Model::new(meta.encoder, meta.grid, cells, meta.standardization)?;
        model.params = ParamSet::new(template.names, tensors)?;
        Ok(model)
    }
}
