//! Evaluation protocols and metrics: the odd/even query-database split,
//! down-sampling and distortion, mean rank, HR@k and Ra@b.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{shift_point, AugmentConfig};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::geo::Trajectory;
use crate::search::l1;

/// Splits a trajectory into its points at 1-based odd positions and those at
/// 1-based even positions.
pub fn split_odd_even(t: &Trajectory) -> (Trajectory, Trajectory) {
    let odd = t.points.iter().step_by(2).copied().collect();
    let even = t.points.iter().skip(1).step_by(2).copied().collect();
    (t.with_points(odd), t.with_points(even))
}

/// Queries, database and for each query the database index of its truth.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDb {
    pub queries: Vec<Trajectory>,
    pub database: Vec<Trajectory>,
    pub truth: Vec<usize>,
}

/// Samples `n_queries` source trajectories (at least 4 points each); the odd
/// half of each becomes a query and the even half its ground truth in the
/// database. The database is padded to `db_size` with the even halves of
/// further distinct trajectories, then shuffled.
pub fn make_query_db<R: Rng + ?Sized>(trajs: &[Trajectory], n_queries: usize, db_size: usize, rng: &mut R) -> Result<QueryDb> {
    if n_queries == 0 || n_queries > db_size {
        return Err(Error::input(format!(
            "need 1 <= n_queries <= db_size, got {n_queries} and {db_size}"
        )));
    }
    let eligible: Vec<usize> = (0..trajs.len()).filter(|&i| trajs[i].len() >= 4).collect();
    if eligible.len() < n_queries || trajs.len() < db_size {
        return Err(Error::input(format!(
            "pool too small: {} trajectories ({} with >= 4 points) for {n_queries} queries and |D| = {db_size}",
            trajs.len(),
            eligible.len()
        )));
    }
    let sources: Vec<usize> = eligible.choose_multiple(rng, n_queries).copied().collect();
    let used: HashSet<usize> = sources.iter().copied().collect();
    let rest: Vec<usize> = (0..trajs.len()).filter(|i| !used.contains(i) && trajs[*i].len() >= 2).collect();
    let pad_n = db_size - n_queries;
    if rest.len() < pad_n {
        return Err(Error::input("pool too small to pad the database"));
    }
    let pads: Vec<usize> = rest.choose_multiple(rng, pad_n).copied().collect();

    let mut queries = Vec::with_capacity(n_queries);
    let mut db: Vec<(Trajectory, Option<usize>)> = Vec::with_capacity(db_size);
    for (q, &i) in sources.iter().enumerate() {
        let (a, b) = split_odd_even(&trajs[i]);
        queries.push(a);
        db.push((b, Some(q)));
    }
    for &i in &pads {
        let (_, b) = split_odd_even(&trajs[i]);
        db.push((b, None));
    }
    db.shuffle(rng);
    let mut truth = vec![0; n_queries];
    for (j, (_, q)) in db.iter().enumerate() {
        if let Some(q) = q {
            truth[*q] = j;
        }
    }
    Ok(QueryDb {
        queries,
        database: db.into_iter().map(|(t, _)| t).collect(),
        truth,
    })
}

fn check_rho(rho: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::input(format!("{what} must lie in [0, 1), got {rho}")));
    }
    Ok(())
}

/// Drops each interior point independently with probability `rho_s`;
/// endpoints always survive.
pub fn downsample<R: Rng + ?Sized>(t: &Trajectory, rho_s: f64, rng: &mut R) -> Result<Trajectory> {
    check_rho(rho_s, "rho_s")?;
    t.require_len(2, "downsample")?;
    let n = t.len();
    let pts = t
        .points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i == 0 || *i == n - 1 || rng.random::<f64>() >= rho_s)
        .map(|(_, p)| *p)
        .collect();
    Ok(t.with_points(pts))
}

/// Shifts a uniformly chosen subset of `ceil(rho_d * n)` points with the
/// bounded-Gaussian offset of the shift augmentation (default radius).
pub fn distort<R: Rng + ?Sized>(t: &Trajectory, rho_d: f64, rng: &mut R) -> Result<Trajectory> {
    let d = AugmentConfig::default();
    distort_with(t, rho_d, d.rho_m, d.sigma, rng)
}

pub fn distort_with<R: Rng + ?Sized>(t: &Trajectory, rho_d: f64, rho_m: f64, sigma: f64, rng: &mut R) -> Result<Trajectory> {
    check_rho(rho_d, "rho_d")?;
    t.require_len(2, "distort")?;
    if !(rho_m > 0.0 && sigma > 0.0) {
        return Err(Error::input("distortion radius and sigma must be positive"));
    }
    let n = t.len();
    let k = distorted_count(n, rho_d);
    let mut pts = t.points.clone();
    for i in rand::seq::index::sample(rng, n, k).into_vec() {
        pts[i] = shift_point(&pts[i], rho_m, sigma, rng);
    }
    Ok(t.with_points(pts))
}

/// `ceil(rho_d * n)` with a small tolerance so 0.2 * 10 counts as 2.
pub fn distorted_count(n: usize, rho_d: f64) -> usize {
    ((rho_d * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// 1-based rank of `target` among `dists` (ascending), ties broken by id.
pub fn rank_of(dists: &[f64], ids: &[String], target: usize) -> usize {
    let dt = dists[target];
    1 + dists
        .iter()
        .enumerate()
        .filter(|&(j, &d)| j != target && (d < dt || (d == dt && ids[j] < ids[target])))
        .count()
}

/// Mean rank of each query's truth by L1 embedding distance.
pub fn mean_rank_embeddings(queries: &[Vec<f32>], database: &[Vec<f32>], db_ids: &[String], truth: &[usize]) -> Result<f64> {
    if queries.is_empty() || queries.len() != truth.len() || database.len() != db_ids.len() {
        return Err(Error::input("mean rank needs one truth per query and one id per database row"));
    }
    if truth.iter().any(|&t| t >= database.len()) {
        return Err(Error::input("truth index outside the database"));
    }
    let total: usize = queries
        .iter()
        .zip(truth)
        .map(|(q, &t)| {
            let dists: Vec<f64> = database.iter().map(|d| l1(q, d)).collect();
            rank_of(&dists, db_ids, t)
        })
        .sum();
    Ok(total as f64 / queries.len() as f64)
}

pub fn mean_rank(model: &Model, qdb: &QueryDb, batch_size: usize) -> Result<f64> {
    let q = model.embed(&qdb.queries, batch_size)?;
    let d = model.embed(&qdb.database, batch_size)?;
    let ids: Vec<String> = qdb.database.iter().map(|t| t.id.clone()).collect();
    mean_rank_embeddings(&q, &d, &ids, &qdb.truth)
}

/// Candidate indices sorted ascending by `dists`, ties by index.
pub fn ranking(dists: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    idx.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    idx
}

/// `|pred[..b] ∩ truth[..a]| / a` for a single query.
pub fn r_a_at_b(pred: &[usize], truth: &[usize], a: usize, b: usize) -> Result<f64> {
    if a == 0 || b == 0 || a > truth.len() || b > pred.len() {
        return Err(Error::input(format!(
            "R{a}@{b} needs 1 <= a <= {} and 1 <= b <= {}",
            truth.len(),
            pred.len()
        )));
    }
    let top: HashSet<usize> = pred[..b].iter().copied().collect();
    Ok(truth[..a].iter().filter(|i| top.contains(i)).count() as f64 / a as f64)
}

pub fn hr_at_k(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    r_a_at_b(pred, truth, k, k)
}

/// Evaluation summary. Maps are ordered so the JSON form is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_rank: Option<f64>,
    pub hr_at_k: BTreeMap<usize, f64>,
    pub r5_at_20: Option<f64>,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// HR@k for each `ks` and R5@20 averaged over queries, from predicted and
/// true distance matrices (rows = queries, columns = candidates).
pub fn ranking_metrics(pred: &[Vec<f64>], truth: &[Vec<f64>], ks: &[usize]) -> Result<(BTreeMap<usize, f64>, Option<f64>)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::input("prediction and truth matrices must have the same non-zero row count"));
    }
    let mut hr = BTreeMap::new();
    let mut r520 = 0.0;
    let n_cand = pred[0].len();
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() || p.len() != n_cand {
            return Err(Error::input("ragged distance matrices"));
        }
        let (rp, rt) = (ranking(p), ranking(t));
        for &k in ks {
            *hr.entry(k).or_insert(0.0) += hr_at_k(&rp, &rt, k)?;
        }
        if n_cand >= 20 {
            r520 += r_a_at_b(&rp, &rt, 5, 20)?;
        }
    }
    let q = pred.len() as f64;
    hr.values_mut().for_each(|v| *v /= q);
    Ok((hr, (n_cand >= 20).then_some(r520 / q)))
}
