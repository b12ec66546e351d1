//! Dense row-major tensors and a reverse-mode tape over a closed op set.
//!
//! A [`Graph`] records every op of one forward pass. `backward` walks the
//! tape once in reverse; a second call without a fresh graph is an error.
//! Everything is generic over [`Real`] so training runs in `f32` and the
//! finite-difference checks in `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// Xavier/Glorot uniform initialization for a `fan_in x fan_out` matrix.
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| F::of(rng.random_range(-a..a))).collect();
        Tensor {
            shape: vec![fan_in, fan_out],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim().max(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Validity mask over keys (or rows): `valid[g * n + j]` for group `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub valid: Vec<bool>,
    pub groups: usize,
    pub n: usize,
}

impl Mask {
    pub fn new(valid: Vec<bool>, groups: usize, n: usize) -> Result<Self> {
        if valid.len() != groups * n {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![groups, n],
                rhs: vec![valid.len()],
            });
        }
        Ok(Mask { valid, groups, n })
    }

    pub fn from_lengths(lengths: &[usize], n: usize) -> Self {
        let valid = lengths.iter().flat_map(|&l| (0..n).map(move |j| j < l)).collect();
        Mask {
            valid,
            groups: lengths.len(),
            n,
        }
    }

    pub fn group(&self, g: usize) -> &[bool] {
        &self.valid[g * self.n..(g + 1) * self.n]
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    Concat(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Relu(Var),
    Dropout(Var, Vec<F>),
    MeanPool { x: Var, weights: Vec<F> },
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Abs(Var),
    Exp(Var),
    RowMean(Var),
    L1Rows(Var, Var),
    Cosine { a: Var, b: Var, an: Vec<F>, bn: Vec<F>, na: Vec<F>, nb: Vec<F> },
    CosineRows { a: Var, b: Var, an: Vec<F>, bn: Vec<F>, na: Vec<F>, nb: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    Mse(Var, Vec<F>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
fn gemm_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let bj = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(ai, bj);
        }
    }
}

// c[m,n] += a[k,m]^T * b[k,n]
fn gemm_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let bp = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == F::zero() {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv = *cv + api * bv;
            }
        }
    }
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

fn normalize_rows<F: Real>(data: &[F], d: usize) -> (Vec<F>, Vec<F>) {
    let rows = data.len() / d;
    let mut out = vec![F::zero(); data.len()];
    let mut norms = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &data[r * d..(r + 1) * d];
        // a floor instead of an additive epsilon keeps x/|x| exactly scale invariant
        let n = dot(row, row).sqrt().max(F::of(NORM_EPS));
        norms[r] = n;
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = v / n;
        }
    }
    (out, norms)
}

// gradient through x -> x/|x| given the upstream gradient on the unit vector
fn unit_backward<F: Real>(g_unit: &[F], unit: &[F], norm: F, out: &mut [F]) {
    let proj = dot(g_unit, unit);
    for ((o, &g), &u) in out.iter_mut().zip(g_unit).zip(unit) {
        *o = *o + (g - proj * u) / norm;
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `a[..., k] x b[k, n]`, leading dims of `a` flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![F::zero(); m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), ng))
    }

    /// Batched `[N, m, k] x [N, k, n] -> [N, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); nb * m * n];
        {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            for i in 0..nb {
                gemm_nn(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape: vec![nb, m, n], data: out }, Op::Bmm(a, b), ng))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = self.value(a).len() / (r * c).max(1);
        let src = &self.value(a).data;
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batches {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::TransposeLast2(a), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            shape: sa.to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `a[..., n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        let n = *sa.last().unwrap_or(&0);
        if sb != [n] {
            return Err(shape_err("add_bias", &sa, &sb));
        }
        let bv = &self.value(bias).data;
        let data = self
            .value(a)
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let ng = self.needs(&[a, bias]);
        Ok(self.push(Tensor { shape: sa, data }, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x * c).collect(),
        };
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `s * a` with `s` a one-element (learnable) tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).data[0];
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x * c).collect(),
        };
        let ng = self.needs(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), ng))
    }

    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat_last_dim", &sa, &sb));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        let rows = if da > 0 { va.len() / da } else { vb.len() / db.max(1) };
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va[r * da..(r + 1) * da]);
            data.extend_from_slice(&vb[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Concat(a, b), ng))
    }

    /// Row softmax. With a key mask, invalid columns get an additive −∞
    /// (probability exactly 0). Rows are grouped so that the `r`-th block of
    /// `rows / mask.groups` consecutive rows uses mask group `r`.
    pub fn softmax_last_dim(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        let rows = t.rows();
        if let Some(m) = mask {
            if m.n != n || m.groups == 0 || rows % m.groups != 0 {
                return Err(shape_err("softmax mask", &t.shape, &[m.groups, m.n]));
            }
        }
        let per_group = mask.map_or(rows, |m| rows / m.groups);
        let mut out = vec![F::zero(); t.len()];
        for r in 0..rows {
            let x = &t.data[r * n..(r + 1) * n];
            let valid = mask.map(|m| m.group(r / per_group));
            let ok = |j: usize| valid.is_none_or(|v| v[j]);
            let mx = (0..n).filter(|&j| ok(j)).map(|j| x[j]).fold(F::neg_infinity(), F::max);
            if mx == F::neg_infinity() {
                return Err(Error::Numeric(format!("softmax over a fully masked row {r}")));
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut s = F::zero();
            for j in 0..n {
                if ok(j) {
                    o[j] = (x[j] - mx).exp();
                    s = s + o[j];
                }
            }
            o.iter_mut().for_each(|v| *v = *v / s);
        }
        let shape = t.shape.clone();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(a), ng))
    }

    /// Per-row normalization over the last dim with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &t.shape, self.shape(gain)));
        }
        let rows = t.rows();
        let (gv, bv) = (&self.value(gain).data, &self.value(bias).data);
        let mut xhat = vec![F::zero(); t.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); t.len()];
        let df = F::of(d as f64);
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let inv = F::one() / (var + F::of(LAYER_NORM_EPS)).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = t.shape.clone();
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(F::zero())).collect(),
        };
        let ng = self.needs(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    /// Inverted dropout: kept activations are scaled by `1/(1-rate)` in
    /// training; identity (no node) in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let t = self.value(a);
        let mask: Vec<F> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        };
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Dropout(a, mask), ng))
    }

    /// `[B, l, d] -> [B, d]`, mean over rows whose mask entry is valid.
    pub fn mean_pool_rows(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.groups != s[0] || mask.n != s[1] {
            return Err(shape_err("mean_pool_rows", &s, &[mask.groups, mask.n]));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut weights = vec![F::zero(); b * l];
        for g in 0..b {
            let cnt = mask.group(g).iter().filter(|&&v| v).count();
            if cnt == 0 {
                return Err(Error::Numeric(format!("mean pool over an empty sequence {g}")));
            }
            for j in 0..l {
                if mask.group(g)[j] {
                    weights[g * l + j] = F::one() / F::of(cnt as f64);
                }
            }
        }
        let src = &self.value(x).data;
        let mut out = vec![F::zero(); b * d];
        for g in 0..b {
            for j in 0..l {
                let w = weights[g * l + j];
                if w == F::zero() {
                    continue;
                }
                let row = &src[(g * l + j) * d..(g * l + j + 1) * d];
                for (o, &v) in out[g * d..(g + 1) * d].iter_mut().zip(row) {
                    *o = *o + w * v;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor { shape: vec![b, d], data: out }, Op::MeanPool { x, weights }, ng))
    }

    /// `[B, l, h*e] -> [B*h, l, e]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(shape_err("split_heads", &s, &[heads]));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let e = d / heads;
        let src = &self.value(a).data;
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for i in 0..l {
                for h in 0..heads {
                    let from = (bi * l + i) * d + h * e;
                    let to = ((bi * heads + h) * l + i) * e;
                    out[to..to + e].copy_from_slice(&src[from..from + e]);
                }
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![b * heads, l, e], data: out }, Op::SplitHeads(a, heads), ng))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(shape_err("merge_heads", &s, &[heads]));
        }
        let (bh, l, e) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = e * heads;
        let src = &self.value(a).data;
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            for i in 0..l {
                for h in 0..heads {
                    let to = (bi * l + i) * d + h * e;
                    let from = ((bi * heads + h) * l + i) * e;
                    out[to..to + e].copy_from_slice(&src[from..from + e]);
                }
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![b, l, d], data: out }, Op::MergeHeads(a, heads), ng))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.abs()).collect(),
        };
        let ng = self.needs(&[a]);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.exp()).collect(),
        };
        let ng = self.needs(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    /// `[N, d] -> [idx.len(), d]` gather of rows; repeated indices allowed.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 {
            return Err(shape_err("select_rows", &t.shape, &[0, 0]));
        }
        let (n, d) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("select_rows", &[bad], &[n]));
        }
        let data = idx.iter().flat_map(|&i| t.data[i * d..(i + 1) * d].iter().copied()).collect();
        let ng = self.needs(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), d],
                data,
            },
            Op::SelectRows(a, idx.to_vec()),
            ng,
        ))
    }

    /// `[.., d] -> [..]` mean over the last dim.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let data = t.data.chunks(d).map(|r| r.iter().copied().sum::<F>() / F::of(d as f64)).collect();
        let mut shape = t.shape.clone();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(&[a]);
        self.push(Tensor { shape, data }, Op::RowMean(a), ng)
    }

    /// Row-wise L1 distance `[N, d] x [N, d] -> [N]`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "l1_distance", |x, y| (x - y).abs())?;
        let d = t.last_dim();
        let data: Vec<F> = t.data.chunks(d).map(|r| r.iter().copied().sum()).collect();
        let n = data.len();
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape: vec![n], data }, Op::L1Rows(a, b), ng))
    }

    /// Cosine similarity matrix `[N, d] x [M, d] -> [N, M]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("cosine_similarity", &sa, &sb));
        }
        let d = sa[1];
        let (an, na) = normalize_rows(&self.value(a).data, d);
        let (bn, nb) = normalize_rows(&self.value(b).data, d);
        let mut out = vec![F::zero(); sa[0] * sb[0]];
        gemm_nt(&an, &bn, &mut out, sa[0], d, sb[0]);
        let ng = self.needs(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![sa[0], sb[0]], data: out },
            Op::Cosine { a, b, an, bn, na, nb },
            ng,
        ))
    }

    /// Row-aligned cosine `[N, d] x [N, d] -> [N]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(shape_err("cosine_rows", &sa, &sb));
        }
        let d = sa[1];
        let (an, na) = normalize_rows(&self.value(a).data, d);
        let (bn, nb) = normalize_rows(&self.value(b).data, d);
        let data: Vec<F> = (0..sa[0]).map(|r| dot(&an[r * d..(r + 1) * d], &bn[r * d..(r + 1) * d])).collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![sa[0]], data },
            Op::CosineRows { a, b, an, bn, na, nb },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.last_dim());
        if t.shape.len() != 2 || targets.len() != rows || targets.iter().any(|&k| k >= c) {
            return Err(shape_err("softmax_cross_entropy", &t.shape, &[targets.len()]));
        }
        let mut probs = vec![F::zero(); t.len()];
        let mut loss = F::zero();
        for r in 0..rows {
            let x = &t.data[r * c..(r + 1) * c];
            let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
            let s: F = x.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (x[j] - mx).exp() / s;
            }
            loss = loss - (x[targets[r]] - mx - s.ln());
        }
        let out = Tensor::scalar(loss / F::of(rows as f64));
        let ng = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &[F]) -> Result<Var> {
        let t = self.value(a);
        if t.len() != target.len() || t.is_empty() {
            return Err(shape_err("mse", &t.shape, &[target.len()]));
        }
        let s: F = t.data.iter().zip(target).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / F::of(t.len() as f64));
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Mse(a, target.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().copied().sum::<F>() / F::of(t.len().max(1) as f64);
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Reverse pass from a one-element loss. Callable once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph; rebuild the forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [F], &Self)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let mut buf = self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(&mut buf, self);
        self.grads[v.0] = Some(buf);
    }

    fn backprop_node(&mut self, i: usize, g: &[F]) {
        // the op is moved out while gradients accumulate into inputs
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let sb = self.shape(b).to_vec();
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(a).len() / k;
                self.acc(a, |ga, s| gemm_nt(g, &s.value(b).data, ga, m, n, k));
                self.acc(b, |gb, s| gemm_tn(&s.value(a).data, g, gb, k, m, n));
            }
            &Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                self.acc(a, |ga, s| {
                    let bv = &s.value(b).data;
                    for t in 0..nb {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(b, |gb, s| {
                    let av = &s.value(a).data;
                    for t in 0..nb {
                        gemm_tn(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            &Op::TransposeLast2(a) => {
                let s = self.shape(a).to_vec();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                self.acc(a, |ga, _| {
                    let batches = ga.len() / (r * c).max(1);
                    for bt in 0..batches {
                        let o = bt * r * c;
                        for x in 0..r {
                            for y in 0..c {
                                ga[o + x * c + y] = ga[o + x * c + y] + g[o + y * r + x];
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
            }
            &Op::Sub(a, b) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            &Op::Mul(a, b) => {
                self.acc(a, |ga, s| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(&s.value(b).data) {
                        *x = *x + gy * bv;
                    }
                });
                self.acc(b, |gb, s| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(&s.value(a).data) {
                        *x = *x + gy * av;
                    }
                });
            }
            &Op::AddBias(a, bias) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                self.acc(bias, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * c));
            }
            &Op::ScaleBy(a, sv) => {
                let c = self.value(sv).data[0];
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * c));
                self.acc(sv, |gs, s| {
                    gs[0] = gs[0] + s.value(a).data.iter().zip(g).map(|(&x, &y)| x * y).sum::<F>();
                });
            }
            &Op::Concat(a, b) => {
                let (da, db) = (self.value(a).last_dim(), self.value(b).last_dim());
                let w = da + db;
                self.acc(a, |ga, _| {
                    for (r, row) in g.chunks(w).enumerate() {
                        for j in 0..da {
                            ga[r * da + j] = ga[r * da + j] + row[j];
                        }
                    }
                });
                self.acc(b, |gb, _| {
                    for (r, row) in g.chunks(w).enumerate() {
                        for j in 0..db {
                            gb[r * db + j] = gb[r * db + j] + row[da + j];
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let n = self.nodes[i].value.last_dim();
                let y = self.nodes[i].value.data.clone();
                self.acc(a, |ga, _| {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            ga[r * n + j] = ga[r * n + j] + yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.value(x).last_dim();
                let df = F::of(d as f64);
                self.acc(gain, |gg, _| {
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] = gg[j] + row[j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(bias, |gb, _| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                });
                self.acc(x, |gx, s| {
                    let gv = &s.value(gain).data;
                    let mut dxh = vec![F::zero(); d];
                    for (r, row) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = row[j] * gv[j];
                        }
                        let s1: F = dxh.iter().copied().sum();
                        let s2 = dot(&dxh, xh);
                        let k = inv_std[r] / df;
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + k * (df * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                });
            }
            &Op::Relu(a) => {
                self.acc(a, |ga, s| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(&s.value(a).data) {
                        if v > F::zero() {
                            *x = *x + gy;
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                self.acc(*a, |ga, _| {
                    for ((x, &gy), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *x = *x + gy * m;
                    }
                });
            }
            Op::MeanPool { x, weights } => {
                let s = self.shape(*x).to_vec();
                let (b, l, d) = (s[0], s[1], s[2]);
                self.acc(*x, |gx, _| {
                    for bi in 0..b {
                        for j in 0..l {
                            let w = weights[bi * l + j];
                            if w == F::zero() {
                                continue;
                            }
                            let o = (bi * l + j) * d;
                            for k in 0..d {
                                gx[o + k] = gx[o + k] + w * g[bi * d + k];
                            }
                        }
                    }
                });
            }
            &Op::SplitHeads(a, heads) => {
                let s = self.shape(a).to_vec();
                let (b, l, d) = (s[0], s[1], s[2]);
                let e = d / heads;
                self.acc(a, |ga, _| {
                    for bi in 0..b {
                        for t in 0..l {
                            for h in 0..heads {
                                let to = (bi * l + t) * d + h * e;
                                let from = ((bi * heads + h) * l + t) * e;
                                for k in 0..e {
                                    ga[to + k] = ga[to + k] + g[from + k];
                                }
                            }
                        }
                    }
                });
            }
            &Op::MergeHeads(a, heads) => {
                let s = self.shape(a).to_vec();
                let (bh, l, e) = (s[0], s[1], s[2]);
                let d = e * heads;
                self.acc(a, |ga, _| {
                    for bi in 0..bh / heads {
                        for t in 0..l {
                            for h in 0..heads {
                                let from = (bi * l + t) * d + h * e;
                                let to = ((bi * heads + h) * l + t) * e;
                                for k in 0..e {
                                    ga[to + k] = ga[to + k] + g[from + k];
                                }
                            }
                        }
                    }
                });
            }
            &Op::Abs(a) => {
                self.acc(a, |ga, s| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(&s.value(a).data) {
                        *x = *x + gy * v.signum() * F::from(u8::from(v != F::zero())).unwrap();
                    }
                });
            }
            &Op::Exp(a) => {
                let y = self.nodes[i].value.data.clone();
                self.acc(a, |ga, _| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(&y) {
                        *x = *x + gy * v;
                    }
                });
            }
            &Op::RowMean(a) => {
                let d = self.value(a).last_dim();
                let inv = F::one() / F::of(d as f64);
                self.acc(a, |ga, _| {
                    for (r, row) in ga.chunks_mut(d).enumerate() {
                        row.iter_mut().for_each(|x| *x = *x + g[r] * inv);
                    }
                });
            }
            &Op::L1Rows(a, b) => {
                let d = self.value(a).last_dim();
                let sign: Vec<F> = self
                    .value(a)
                    .data
                    .iter()
                    .zip(&self.value(b).data)
                    .enumerate()
                    .map(|(k, (&x, &y))| {
                        let diff = x - y;
                        let sg = if diff > F::zero() {
                            F::one()
                        } else if diff < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        sg * g[k / d]
                    })
                    .collect();
                self.acc(a, |ga, _| ga.iter_mut().zip(&sign).for_each(|(x, &y)| *x = *x + y));
                self.acc(b, |gb, _| gb.iter_mut().zip(&sign).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Cosine { a, b, an, bn, na, nb } => {
                let (a, b) = (*a, *b);
                let d = self.value(a).last_dim();
                let (n, m) = (na.len(), nb.len());
                self.acc(a, |ga, _| {
                    let mut gu = vec![F::zero(); n * d];
                    gemm_nn(g, bn, &mut gu, n, m, d);
                    for r in 0..n {
                        unit_backward(&gu[r * d..(r + 1) * d], &an[r * d..(r + 1) * d], na[r], &mut ga[r * d..(r + 1) * d]);
                    }
                });
                self.acc(b, |gb, _| {
                    let mut gu = vec![F::zero(); m * d];
                    gemm_tn(g, an, &mut gu, m, n, d);
                    for r in 0..m {
                        unit_backward(&gu[r * d..(r + 1) * d], &bn[r * d..(r + 1) * d], nb[r], &mut gb[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CosineRows { a, b, an, bn, na, nb } => {
                let (a, b) = (*a, *b);
                let d = self.value(a).last_dim();
                self.acc(a, |ga, _| {
                    for r in 0..na.len() {
                        let gu: Vec<F> = bn[r * d..(r + 1) * d].iter().map(|&v| v * g[r]).collect();
                        unit_backward(&gu, &an[r * d..(r + 1) * d], na[r], &mut ga[r * d..(r + 1) * d]);
                    }
                });
                self.acc(b, |gb, _| {
                    for r in 0..nb.len() {
                        let gu: Vec<F> = an[r * d..(r + 1) * d].iter().map(|&v| v * g[r]).collect();
                        unit_backward(&gu, &bn[r * d..(r + 1) * d], nb[r], &mut gb[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / F::of(targets.len() as f64);
                self.acc(*logits, |gl, _| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            gl[r * c + j] = gl[r * c + j] + scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Mse(a, target) => {
                let k = F::of(2.0) * g[0] / F::of(target.len() as f64);
                self.acc(*a, |ga, s| {
                    for ((x, &v), &t) in ga.iter_mut().zip(&s.value(*a).data).zip(target) {
                        *x = *x + k * (v - t);
                    }
                });
            }
            Op::SelectRows(a, idx) => {
                let d = self.value(*a).last_dim();
                self.acc(*a, |ga, _| {
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..d {
                            ga[i * d + k] = ga[i * d + k] + g[r * d + k];
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                self.acc(a, |ga, _| ga.iter_mut().for_each(|x| *x = *x + g[0]));
            }
            &Op::Mean(a) => {
                let k = g[0] / F::of(self.value(a).len().max(1) as f64);
                self.acc(a, |ga, _| ga.iter_mut().for_each(|x| *x = *x + k));
            }
            &Op::Reshape(a) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
            }
        }
        self.nodes[i].op = op;
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every parameter. `grads[i] = None` means no gradient
    /// reached parameter `i`; it is treated as zero.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err("adam", &[params.len(), grads.len()], &[self.m.len()]));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape != self.m[i].shape || grads[i].as_ref().is_some_and(|g| g.shape != p.shape) {
                return Err(shape_err("adam", &p.shape, &self.m[i].shape));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for k in 0..p.data.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data[k] as f64);
                let mk = b1 * m[k] as f64 + (1.0 - b1) * g;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let upd = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p.data[k] = (p.data[k] as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

/// Largest per-entry relative error between analytic gradients and central
/// finite differences of `f` around `inputs`.
///
/// `f` rebuilds the forward pass from scratch on a fresh graph given one
/// leaf per input and returns the scalar loss. Entries where both gradients
/// are below `1e-7` in magnitude are compared absolutely.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(&t.shape)))
        .collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data[0])
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].len() {
            let orig = xs[i].data[k];
            xs[i].data[k] = orig + h;
            let up = eval(&xs)?;
            xs[i].data[k] = orig - h;
            let down = eval(&xs)?;
            xs[i].data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data[k];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
