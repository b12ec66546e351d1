//! Regular grid over the data region, the 8-neighbor cell graph, and
//! self-supervised cell embeddings learned from uniform random walks with
//! skip-gram negative sampling.
//!
//! The cell dictionary is sparse: only cells touched by a trajectory point
//! plus their 8-neighborhood become graph nodes, keyed by linear cell id
//! `row * n_cols + col`.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{BBox, Point, Trajectory};
use crate::search::EmbeddingStore;

pub type CellId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub origin: Point,
    pub cell_side: f64,
    pub n_cols: usize,
    pub n_rows: usize,
}

impl Grid {
    pub fn build(bbox: BBox, cell_side: f64) -> Result<Grid> {
        if !(cell_side > 0.0) || !cell_side.is_finite() {
            return Err(Error::input(format!("cell side must be positive, got {cell_side}")));
        }
        let (w, h) = (bbox.width(), bbox.height());
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(Error::input(format!("degenerate bounding box {w} x {h}")));
        }
        Ok(Grid {
            origin: bbox.min,
            cell_side,
            n_cols: (w / cell_side).ceil() as usize,
            n_rows: (h / cell_side).ceil() as usize,
        })
    }

    /// Grid over the trajectories' bounding box expanded by one cell on each side.
    pub fn covering(trajs: &[Trajectory], cell_side: f64) -> Result<Grid> {
        let bb = BBox::of_trajectories(trajs).ok_or_else(|| Error::input("no points to grid"))?;
        Grid::build(bb.expand(cell_side), cell_side)
    }

    pub fn cell_count(&self) -> usize {
        self.n_cols * self.n_rows
    }

    pub fn max_corner(&self) -> Point {
        self.origin.translate(
            self.n_cols as f64 * self.cell_side,
            self.n_rows as f64 * self.cell_side,
        )
    }

    /// `(col, row)` of the cell enclosing `p`. Points on an interior edge belong
    /// to the higher-index cell; the global max edge clamps inward.
    pub fn cell_coords(&self, p: &Point) -> Result<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.cell_side;
        let fy = (p.y - self.origin.y) / self.cell_side;
        let inside = |f: f64, n: usize| f >= 0.0 && f <= n as f64;
        if !inside(fx, self.n_cols) || !inside(fy, self.n_rows) {
            return Err(Error::input(format!("point ({}, {}) lies outside the grid", p.x, p.y)));
        }
        let col = (fx.floor() as usize).min(self.n_cols - 1);
        let row = (fy.floor() as usize).min(self.n_rows - 1);
        Ok((col, row))
    }

    pub fn cell_id(&self, col: usize, row: usize) -> CellId {
        (row * self.n_cols + col) as CellId
    }

    pub fn cell_of(&self, p: &Point) -> Result<CellId> {
        let (c, r) = self.cell_coords(p)?;
        Ok(self.cell_id(c, r))
    }

    pub fn coords_of(&self, id: CellId) -> (usize, usize) {
        let id = id as usize;
        (id % self.n_cols, id / self.n_cols)
    }

    /// Ids of the existing orthogonal and diagonal neighbors of a cell.
    pub fn neighbors(&self, id: CellId) -> impl Iterator<Item = CellId> + '_ {
        let (c, r) = self.coords_of(id);
        let (c, r) = (c as i64, r as i64);
        (-1i64..=1)
            .flat_map(move |dr| (-1i64..=1).map(move |dc| (c + dc, r + dr)))
            .filter(move |&(nc, nr)| {
                (nc, nr) != (c, r)
                    && nc >= 0
                    && nr >= 0
                    && (nc as usize) < self.n_cols
                    && (nr as usize) < self.n_rows
            })
            .map(|(nc, nr)| self.cell_id(nc as usize, nr as usize))
    }

    /// Cells enclosing any point of `trajs` plus their 8-neighborhoods, sorted.
    pub fn active_cells(&self, trajs: &[Trajectory]) -> Result<Vec<CellId>> {
        let mut set = BTreeSet::new();
        for t in trajs {
            for p in &t.points {
                let id = self.cell_of(p)?;
                set.insert(id);
                set.extend(self.neighbors(id));
            }
        }
        Ok(set.into_iter().collect())
    }
}

/// Undirected 8-neighbor adjacency over a set of cells. Node `i` is `cells[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGraph {
    pub cells: Vec<CellId>,
    pub adjacency: Vec<Vec<u32>>,
}

impl CellGraph {
    /// Graph over every cell of the grid.
    pub fn dense(grid: &Grid) -> CellGraph {
        let cells: Vec<CellId> = (0..grid.cell_count() as CellId).collect();
        Self::over_cells(grid, &cells)
    }

    /// Graph restricted to `cells` (must be sorted and unique); edges only
    /// between cells that are both present.
    pub fn over_cells(grid: &Grid, cells: &[CellId]) -> CellGraph {
        let index: HashMap<CellId, u32> =
            cells.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        let adjacency = cells
            .iter()
            .map(|&c| {
                let mut adj: Vec<u32> =
                    grid.neighbors(c).filter_map(|n| index.get(&n).copied()).collect();
                adj.sort_unstable();
                adj
            })
            .collect();
        CellGraph {
            cells: cells.to_vec(),
            adjacency,
        }
    }

    pub fn node_count(&self) -> usize {
        self.cells.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent RNG for sub-stream `stream` of a run seeded with `seed`.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream))
}

/// Uniform (p = q = 1) random walks: `walks_per_node` walks from every node,
/// node-major order. Isolated nodes produce length-1 walks.
pub fn random_walks(graph: &CellGraph, walks_per_node: usize, walk_len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if walk_len < 2 {
        return Err(Error::input("walk length must be at least 2"));
    }
    let walks: Vec<Vec<Vec<u32>>> = (0..graph.node_count())
        .into_par_iter()
        .map(|start| {
            let mut rng = derived_rng(seed, start as u64);
            (0..walks_per_node)
                .map(|_| {
                    let mut walk = Vec::with_capacity(walk_len);
                    let mut cur = start as u32;
                    walk.push(cur);
                    while walk.len() < walk_len {
                        let adj = &graph.adjacency[cur as usize];
                        if adj.is_empty() {
                            break;
                        }
                        cur = adj[rng.random_range(0..adj.len())];
                        walk.push(cur);
                    }
                    walk
                })
                .collect()
        })
        .collect();
    Ok(walks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub walks_per_node: usize,
    pub walk_len: usize,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 256,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            walks_per_node: 10,
            walk_len: 80,
            seed: 0,
        }
    }
}

/// Learned vector per cell, row `i` belonging to `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellEmbeddingTable {
    pub ids: Vec<CellId>,
    pub dim: usize,
    pub data: Vec<f32>,
    index: HashMap<CellId, usize>,
}

impl CellEmbeddingTable {
    pub fn new(ids: Vec<CellId>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Shape {
                op: "cell table",
                lhs: vec![ids.len(), dim],
                rhs: vec![data.len()],
            });
        }
        let index: HashMap<CellId, usize> = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if index.len() != ids.len() {
            return Err(Error::input("duplicate cell ids in embedding table"));
        }
        Ok(CellEmbeddingTable { ids, dim, data, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn lookup(&self, id: CellId) -> Option<&[f32]> {
        self.index.get(&id).map(|&i| self.row(i))
    }

    /// The table in embedding-file form, ids rendered as decimal strings.
    pub fn to_store(&self) -> Result<EmbeddingStore> {
        EmbeddingStore::new(self.ids.iter().map(|c| c.to_string()).collect(), self.dim, self.data.clone())
    }

    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        let ids = store
            .ids()
            .iter()
            .map(|s| s.parse::<CellId>().map_err(|_| Error::Format(format!("cell id '{s}' is not an integer"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, store.dim(), store.data().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct SkipGramReport {
    pub table: CellEmbeddingTable,
    /// Mean per-pair loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

// eight independent accumulators so the reduction vectorizes
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Skip-gram with negative sampling over a walk corpus of node indices
/// `0..node_count`. Single-threaded, so a fixed seed gives a bit-identical table.
///
/// The returned vector of a node is the sum of its input and context vectors.
/// Self-pairs (a node in its own window) are skipped, as are negatives equal
/// to the center or the context node. Input vectors start uniform in
/// `[-0.5/dim, 0.5/dim]`, context vectors at zero, so a node absent from the
/// corpus keeps its initialization.
pub fn train_skipgram(
    corpus: &[Vec<u32>],
    node_count: usize,
    cfg: &SkipGramConfig,
) -> Result<(Vec<f32>, Vec<f64>)> {
    let total_tokens: usize = corpus.iter().map(Vec::len).sum();
    if corpus.is_empty() || total_tokens == 0 {
        return Err(Error::input("skip-gram corpus is empty"));
    }
    if cfg.dim < 2 {
        return Err(Error::config("skip-gram dimension must be at least 2"));
    }
    let d = cfg.dim;
    let mut rng = derived_rng(cfg.seed, u64::MAX);
    let bound = 0.5 / d as f32;
    let mut input: Vec<f32> = (0..node_count * d).map(|_| rng.random_range(-bound..bound)).collect();
    let mut context = vec![0f32; node_count * d];

    let mut freq = vec![0f64; node_count];
    for &n in corpus.iter().flatten() {
        freq[n as usize] += 1.0;
    }
    let weights: Vec<f64> = freq.iter().map(|f| f.powf(0.75)).collect();
    let sampler = WeightedAliasIndex::new(weights).map_err(|e| Error::input(e.to_string()))?;

    let total_steps = (cfg.epochs * total_tokens).max(1) as f64;
    let min_lr = cfg.lr * 1e-4;
    let mut step = 0usize;
    let mut grad = vec![0f32; d];
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0f64;
        let mut pairs = 0usize;
        for walk in corpus {
            for (pos, &center) in walk.iter().enumerate() {
                let lr = (cfg.lr * (1.0 - step as f64 / total_steps)).max(min_lr) as f32;
                step += 1;
                let lo = pos.saturating_sub(cfg.window);
                let hi = (pos + cfg.window).min(walk.len() - 1);
                for (cpos, &ctx) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if cpos == pos || ctx == center {
                        continue;
                    }
                    let ci = center as usize * d;
                    let center_vec = &input[ci..ci + d];
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let mut pair_loss = 0.0f32;
                    let mut update = |target: usize, label: f32| {
                        let tv = &mut context[target * d..(target + 1) * d];
                        let dot = dot(center_vec, tv);
                        let sig = sigmoid(dot);
                        let p = if label > 0.0 { sig } else { 1.0 - sig };
                        pair_loss -= p.max(f32::MIN_POSITIVE).ln();
                        let g = (label - sig) * lr;
                        for ((gk, tk), ck) in grad.iter_mut().zip(tv.iter_mut()).zip(center_vec) {
                            *gk += g * *tk;
                            *tk += g * ck;
                        }
                    };
                    update(ctx as usize, 1.0);
                    for _ in 0..cfg.negatives {
                        let neg = sampler.sample(&mut rng) as u32;
                        if neg == ctx || neg == center {
                            continue;
                        }
                        update(neg as usize, 0.0);
                    }
                    for (x, g) in input[ci..ci + d].iter_mut().zip(&grad) {
                        *x += g;
                    }
                    loss_sum += pair_loss as f64;
                    pairs += 1;
                }
            }
        }
        epoch_loss.push(if pairs > 0 { loss_sum / pairs as f64 } else { 0.0 });
    }
    let table = input.iter().zip(&context).map(|(a, b)| a + b).collect();
    Ok((table, epoch_loss))
}

/// Walks plus skip-gram over `graph`, returning a table keyed by cell id.
pub fn embed_cells(graph: &CellGraph, cfg: &SkipGramConfig) -> Result<SkipGramReport> {
    let corpus = random_walks(graph, cfg.walks_per_node, cfg.walk_len, cfg.seed)?;
    let (data, epoch_loss) = train_skipgram(&corpus, graph.node_count(), cfg)?;
    let table = CellEmbeddingTable::new(graph.cells.clone(), cfg.dim, data)?;
    Ok(SkipGramReport { table, epoch_loss })
}
