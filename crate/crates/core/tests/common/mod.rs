//! Independent reference implementations shared by the integration tests.
//! They are written for clarity (recursion, memo tables, full scans) and
//! share no code with the library.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajsim::geo::{Point, Trajectory};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..scale), rng.random_range(0.0..scale)))
        .collect()
}

pub fn random_walk(rng: &mut impl Rng, id: &str, n: usize, step: f64) -> Trajectory {
    let mut p = Point::new(rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0));
    let mut pts = vec![p];
    for _ in 1..n {
        p = Point::new(p.x + rng.random_range(-step..step), p.y + rng.random_range(-step..step));
        pts.push(p);
    }
    Trajectory::new(id, pts)
}

fn euclid(a: Point, b: Point) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Distance from `p` to segment `ab` via the clamped projection parameter.
pub fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len2 = vx * vx + vy * vy;
    if len2 == 0.0 {
        return euclid(p, a);
    }
    let t = (((p.x - a.x) * vx + (p.y - a.y) * vy) / len2).clamp(0.0, 1.0);
    euclid(p, Point::new(a.x + t * vx, a.y + t * vy))
}

/// Symmetric Hausdorff over every point/segment combination.
pub fn hausdorff_brute(a: &[Point], b: &[Point]) -> f64 {
    let to_line = |p: Point, line: &[Point]| -> f64 {
        if line.len() == 1 {
            return euclid(p, line[0]);
        }
        let mut best = f64::INFINITY;
        for i in 0..line.len() - 1 {
            best = best.min(seg_dist(p, line[i], line[i + 1]));
        }
        best
    };
    let mut h: f64 = 0.0;
    for &p in a {
        h = h.max(to_line(p, b));
    }
    for &q in b {
        h = h.max(to_line(q, a));
    }
    h
}

pub fn hausdorff_p2p_brute(a: &[Point], b: &[Point]) -> f64 {
    let dir = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| euclid(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    dir(a, b).max(dir(b, a))
}

/// Discrete Fréchet by the recursive coupling definition with memoization.
pub fn frechet_memo(a: &[Point], b: &[Point]) -> f64 {
    fn c(i: usize, j: usize, a: &[Point], b: &[Point], memo: &mut HashMap<(usize, usize), f64>) -> f64 {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let d = euclid(a[i], b[j]);
        let v = match (i, j) {
            (0, 0) => d,
            (0, _) => c(0, j - 1, a, b, memo).max(d),
            (_, 0) => c(i - 1, 0, a, b, memo).max(d),
            _ => c(i - 1, j, a, b, memo)
                .min(c(i - 1, j - 1, a, b, memo))
                .min(c(i, j - 1, a, b, memo))
                .max(d),
        };
        memo.insert((i, j), v);
        v
    }
    c(a.len() - 1, b.len() - 1, a, b, &mut HashMap::new())
}

/// EDR by the top-down suffix recursion with memoization.
pub fn edr_memo(a: &[Point], b: &[Point], eps: f64) -> usize {
    fn e(i: usize, j: usize, a: &[Point], b: &[Point], eps: f64, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let matched = (a[i].x - b[j].x).abs() <= eps && (a[i].y - b[j].y).abs() <= eps;
        let v = (e(i + 1, j + 1, a, b, eps, memo) + usize::from(!matched))
            .min(e(i + 1, j, a, b, eps, memo) + 1)
            .min(e(i, j + 1, a, b, eps, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    e(0, 0, a, b, eps, &mut HashMap::new())
}

/// Textbook recursive Douglas-Peucker on the closed segment.
pub fn dp_recursive(pts: &[Point], eps: f64) -> Vec<usize> {
    fn rec(pts: &[Point], lo: usize, hi: usize, eps: f64, out: &mut Vec<usize>) {
        let mut dmax = -1.0;
        let mut idx = lo;
        for i in lo + 1..hi {
            let d = seg_dist(pts[i], pts[lo], pts[hi]);
            if d > dmax {
                dmax = d;
                idx = i;
            }
        }
        if hi > lo + 1 && dmax > eps {
            rec(pts, lo, idx, eps, out);
            rec(pts, idx, hi, eps, out);
        } else {
            out.push(lo);
        }
    }
    if pts.len() <= 2 {
        return (0..pts.len()).collect();
    }
    let mut out = Vec::new();
    rec(pts, 0, pts.len() - 1, eps, &mut out);
    out.push(pts.len() - 1);
    out
}

/// Full-scan L1 kNN with ascending-id ties.
pub fn knn_brute(ids: &[String], rows: &[Vec<f32>], q: &[f32], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = ids
        .iter()
        .zip(rows)
        .map(|(id, r)| (id.clone(), r.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum()))
        .collect();
    all.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then_with(|| x.0.cmp(&y.0)));
    all.truncate(k);
    all
}

use trajsim::encoder::{EncoderConfig, Model, Standardization};
use trajsim::grid::{embed_cells, CellGraph, Grid, SkipGramConfig};
use trajsim::synth::{generate, SynthConfig};

/// Small synthetic dataset plus an untrained model sized for fast tests.
pub fn tiny_setup(n: usize, seed: u64, d_t: usize, layers: usize) -> (Vec<Trajectory>, Model) {
    let trajs = generate(&SynthConfig {
        n,
        seed,
        min_points: 20,
        max_points: 40,
        bbox: [-8.65, 41.12, -8.60, 41.16],
        ..SynthConfig::default()
    })
    .unwrap();
    let grid = Grid::covering(&trajs, 200.0).unwrap();
    let cells = grid.active_cells(&trajs).unwrap();
    let graph = CellGraph::over_cells(&grid, &cells);
    let sg = SkipGramConfig {
        dim: d_t,
        walks_per_node: 2,
        walk_len: 10,
        epochs: 1,
        seed,
        ..SkipGramConfig::default()
    };
    let table = embed_cells(&graph, &sg).unwrap().table;
    let cfg = EncoderConfig {
        d_t,
        heads: 2,
        heads_s: 2,
        layers,
        spatial_sublayers: 1,
        seed,
        ..EncoderConfig::default()
    };
    let st = Standardization::fit(&trajs, cfg.length_scale).unwrap();
    let model = Model::new(cfg, grid, table, st).unwrap();
    (trajs, model)
}
