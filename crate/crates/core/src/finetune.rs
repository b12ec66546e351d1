//! Fine-tuning the pretrained encoder to approximate a heuristic measure.
//!
//! A pair `(T_i, T_j)` is scored from the symmetric feature `|h_i - h_j|`
//! through a two-layer MLP of width `d`, giving a similarity
//! `s = exp(-mean|u|)`; training minimizes the MSE against the normalized
//! label `exp(-dist / alpha)`.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::Checkpoint;
use crate::encoder::{encode_graph, linear, Bound, Ctx, Enriched, Model, ParamSet};
use crate::error::{Error, Result};
use crate::eval::ranking_metrics;
use crate::geo::Trajectory;
use crate::grid::derived_rng;
use crate::measures::MeasureKind;
use crate::numerics::{AdamState, Graph, Tensor};
use crate::search::l1;

const PAIR_STREAM: u64 = 0x0000_FA12;
const EPOCH_STREAM: u64 = 0x00F1_E90C;
const HEAD_STREAM: u64 = 0x0000_4EAD;
const STRATA: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Last encoder layer plus the head.
    #[default]
    LastLayerHead,
    /// Every encoder layer plus the head.
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_layer_head" | "last" => Ok(Scope::LastLayerHead),
            "all" => Ok(Scope::All),
            other => Err(Error::config(format!("unknown fine-tune scope '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub target: MeasureKind,
    pub scope: Scope,
    /// Label scale; `None` uses the mean training-pair distance.
    pub alpha: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub anchors_per_batch: usize,
    pub partners: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            target: MeasureKind::default(),
            scope: Scope::default(),
            alpha: None,
            epochs: 10,
            lr: 1e-3,
            anchors_per_batch: 64,
            partners: 20,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if self.epochs == 0 || self.anchors_per_batch == 0 || self.partners == 0 {
            return Err(Error::config("fine-tune epochs, anchors_per_batch and partners must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("fine-tune lr must be positive, got {}", self.lr)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config(format!("alpha must be positive, got {a}")));
            }
        }
        Ok(())
    }
}

/// Whether parameter `name` is updated under `scope`. The contrastive
/// projection head never is: fine-tuning reads `h`, not `z`.
pub fn in_scope(scope: Scope, layers: usize, name: &str) -> bool {
    if name.starts_with("head.") {
        return true;
    }
    if name.starts_with("proj.") {
        return false;
    }
    match scope {
        Scope::All => true,
        Scope::LastLayerHead => name.starts_with(&format!("layers.{}.", layers - 1)),
    }
}

pub fn init_head(d: usize, seed: u64) -> Result<ParamSet> {
    let mut rng = derived_rng(seed, HEAD_STREAM);
    ParamSet::new(
        vec!["head.w1".into(), "head.b1".into(), "head.w2".into(), "head.b2".into()],
        vec![
            Tensor::xavier(d, d, &mut rng),
            Tensor::zeros(&[d]),
            Tensor::xavier(d, d, &mut rng),
            Tensor::zeros(&[d]),
        ],
    )
}

/// For every anchor, `partners` others drawn evenly from the ten distance
/// deciles (remainder to the nearest deciles), without replacement.
pub fn sample_pairs<R: Rng + ?Sized>(dist: &[Vec<f64>], partners: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let n = dist.len();
    if n < 2 || dist.iter().any(|r| r.len() != n) {
        return Err(Error::input("pair sampling needs a square distance matrix over >= 2 trajectories"));
    }
    let mut pairs = Vec::with_capacity(n * partners);
    for a in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != a).collect();
        others.sort_by(|&x, &y| dist[a][x].total_cmp(&dist[a][y]).then(x.cmp(&y)));
        if others.len() <= partners {
            pairs.extend(others.into_iter().map(|j| (a, j)));
            continue;
        }
        let m = others.len();
        let mut quota: Vec<usize> = (0..STRATA).map(|k| partners / STRATA + usize::from(k < partners % STRATA)).collect();
        let strata: Vec<&[usize]> = (0..STRATA).map(|k| &others[k * m / STRATA..(k + 1) * m / STRATA]).collect();
        // move quota that a small stratum cannot hold to the next ones
        for k in 0..STRATA {
            let spill = quota[k].saturating_sub(strata[k].len());
            quota[k] -= spill;
            if let Some(next) = (0..STRATA).map(|o| (k + 1 + o) % STRATA).find(|&o| quota[o] < strata[o].len()) {
                quota[next] += spill;
            }
        }
        for (s, &q) in strata.iter().zip(&quota) {
            pairs.extend(s.choose_multiple(rng, q.min(s.len())).map(|&j| (a, j)));
        }
    }
    Ok(pairs)
}

/// `exp(-d / alpha)` for every distance.
pub fn normalized_labels(dists: &[f64], alpha: f64) -> Vec<f64> {
    dists.iter().map(|d| (-d / alpha).exp()).collect()
}

fn mean_distance(dists: &[f64]) -> Result<f64> {
    if dists.is_empty() || dists.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::input("fine-tune labels must be finite non-negative distances"));
    }
    let first = dists[0];
    if dists.iter().all(|&d| d == first) {
        return Err(Error::input("degenerate fine-tune labels: every pair distance is equal"));
    }
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// A fine-tuned encoder with its pair-scoring head.
#[derive(Debug, Clone)]
pub struct Finetuned {
    pub model: Model,
    pub head: ParamSet,
    pub alpha: f64,
    pub target: MeasureKind,
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMeta {
    pub alpha: f64,
    pub target: MeasureKind,
    pub scope: Scope,
}

fn score_graph(g: &mut Graph<f32>, p: &Bound, diff: crate::numerics::Var) -> Result<crate::numerics::Var> {
    let u = linear(g, p, diff, "head.w1", "head.b1")?;
    let u = g.relu(u);
    let u = linear(g, p, u, "head.w2", "head.b2")?;
    let u = g.abs(u);
    let m = g.row_mean(u);
    let m = g.scale(m, -1.0);
    Ok(g.exp(m))
}

impl Finetuned {
    /// Similarity of every `(a_i, b_j)`, rows indexed by `a`.
    pub fn predict(&self, a: &[Trajectory], b: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
        let ha = self.model.embed(a, 64)?;
        let hb = self.model.embed(b, 64)?;
        let d = self.model.config.d_t;
        ha.iter()
            .map(|x| {
                let diff: Vec<f32> = hb.iter().flat_map(|y| x.iter().zip(y).map(|(p, q)| (p - q).abs())).collect();
                let mut g = Graph::<f32>::new();
                let bound = Bound::new(&mut g, &self.head, |_| false);
                let v = g.constant(Tensor::new(vec![hb.len(), d], diff)?);
                let s = score_graph(&mut g, &bound, v)?;
                Ok(g.value(s).data.iter().map(|&v| v as f64).collect())
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint("finetuned")?;
        let meta = FinetuneMeta {
            alpha: self.alpha,
            target: self.target,
            scope: self.scope,
        };
        ck.meta
            .as_object_mut()
            .ok_or_else(|| Error::Format("model metadata is not an object".into()))?
            .insert("finetune".into(), serde_json::to_value(meta)?);
        for (n, t) in self.head.names.iter().zip(&self.head.tensors) {
            ck.push(n.clone(), t.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Finetuned> {
        let model = Model::from_checkpoint(ck)?;
        let meta: FinetuneMeta = serde_json::from_value(
            ck.meta
                .get("finetune")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint is not a fine-tuned model".into()))?,
        )
        .map_err(|e| Error::Format(format!("fine-tune metadata: {e}")))?;
        let template = init_head(model.config.d_t, 0)?;
        let mut tensors = Vec::new();
        for (name, t) in template.names.iter().zip(&template.tensors) {
            let found = ck
                .tensor(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))?;
            if found.shape != t.shape {
                return Err(Error::Format(format!("'{name}' has shape {:?}", found.shape)));
            }
            tensors.push(found.clone());
        }
        Ok(Finetuned {
            model,
            head: ParamSet::new(template.names, tensors)?,
            alpha: meta.alpha,
            target: meta.target,
            scope: meta.scope,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub finetuned: Finetuned,
    /// Mean training-batch MSE per epoch (train mode).
    pub epoch_mse: Vec<f64>,
    /// MSE over all training pairs after the last epoch, eval mode.
    pub final_mse: f64,
    pub pairs: usize,
}

fn combined(model: &Model, head: &ParamSet) -> Result<ParamSet> {
    let mut names = model.params.names.clone();
    names.extend(head.names.iter().cloned());
    let mut tensors = model.params.tensors.clone();
    tensors.extend(head.tensors.iter().cloned());
    ParamSet::new(names, tensors)
}

fn split_combined(all: &ParamSet, n_encoder: usize) -> Result<(ParamSet, ParamSet)> {
    Ok((
        ParamSet::new(all.names[..n_encoder].to_vec(), all.tensors[..n_encoder].to_vec())?,
        ParamSet::new(all.names[n_encoder..].to_vec(), all.tensors[n_encoder..].to_vec())?,
    ))
}

/// One forward pass over the pairs touching `nodes`; returns the graph, the
/// bound parameters and the MSE node.
fn pair_loss<R: Rng>(
    model: &Model,
    params: &ParamSet,
    enriched: &[Enriched],
    pairs: &[(usize, usize, f64)],
    scope: Scope,
    train: bool,
    rng: &mut R,
) -> Result<(Graph<f32>, Vec<crate::numerics::Var>, crate::numerics::Var)> {
    let mut nodes: Vec<usize> = pairs.iter().flat_map(|&(a, b, _)| [a, b]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let slot: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let items: Vec<&Enriched> = nodes.iter().map(|&i| &enriched[i]).collect();
    let batch = model.batch(&items)?;

    let mut g = Graph::<f32>::new();
    let layers = model.config.layers;
    let bound = Bound::new(&mut g, params, |n| in_scope(scope, layers, n));
    let mut ctx = Ctx {
        train,
        dropout: model.config.dropout,
        rng,
    };
    let out = encode_graph(&mut g, &model.config, &bound, &batch, &mut ctx)?;
    let left: Vec<usize> = pairs.iter().map(|p| slot[&p.0]).collect();
    let right: Vec<usize> = pairs.iter().map(|p| slot[&p.1]).collect();
    let hl = g.select_rows(out.h, &left)?;
    let hr = g.select_rows(out.h, &right)?;
    let diff = g.sub(hl, hr)?;
    let diff = g.abs(diff);
    let s = score_graph(&mut g, &bound, diff)?;
    let labels: Vec<f32> = pairs.iter().map(|p| p.2 as f32).collect();
    let loss = g.mse(s, &labels)?;
    Ok((g, bound.vars, loss))
}

/// Fine-tunes `model` on `train` with `dist[i][j]` the target measure
/// between `train[i]` and `train[j]`. Only parameters in scope change.
pub fn finetune(
    model: &Model,
    train: &[Trajectory],
    dist: &[Vec<f64>],
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if dist.len() != train.len() {
        return Err(Error::input("distance matrix does not match the training set"));
    }
    let raw = sample_pairs(dist, cfg.partners, &mut derived_rng(cfg.seed, PAIR_STREAM))?;
    let pair_d: Vec<f64> = raw.iter().map(|&(a, b)| dist[a][b]).collect();
    let mean = mean_distance(&pair_d)?;
    let alpha = cfg.alpha.unwrap_or(mean);
    let labels = normalized_labels(&pair_d, alpha);
    let pairs: Vec<(usize, usize, f64)> = raw.iter().zip(&labels).map(|(&(a, b), &l)| (a, b, l)).collect();
    let enriched: Vec<Enriched> = train.iter().map(|t| model.enrich(t)).collect::<Result<_>>()?;

    let head = init_head(model.config.d_t, cfg.seed)?;
    let n_encoder = model.params.len();
    let mut params = combined(model, &head)?;
    let mut adam = AdamState::new(&params.tensors);
    let mut by_anchor: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for p in &pairs {
        by_anchor.entry(p.0).or_default().push(*p);
    }
    let anchors: Vec<usize> = by_anchor.keys().copied().collect();

    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = derived_rng(cfg.seed ^ EPOCH_STREAM, epoch as u64);
        let mut order = anchors.clone();
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.anchors_per_batch) {
            let batch: Vec<(usize, usize, f64)> = chunk.iter().flat_map(|a| by_anchor[a].iter().copied()).collect();
            let (mut g, vars, loss) = pair_loss(model, &params, &enriched, &batch, cfg.scope, true, &mut rng)?;
            let value = g.value(loss).data[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tune loss in epoch {epoch}")));
            }
            g.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| g.grad(v)).collect();
            adam.step(&mut params.tensors, &grads, cfg.lr)?;
            total += value;
            steps += 1;
        }
        let mse = total / steps as f64;
        on_epoch(epoch, mse);
        epoch_mse.push(mse);
    }

    let mut rng = derived_rng(cfg.seed, 0);
    let mut sq = 0.0;
    for chunk in pairs.chunks(cfg.anchors_per_batch * cfg.partners) {
        let (g, _, loss) = pair_loss(model, &params, &enriched, chunk, cfg.scope, false, &mut rng)?;
        sq += g.value(loss).data[0] as f64 * chunk.len() as f64;
    }
    let final_mse = sq / pairs.len() as f64;

    let (enc, head) = split_combined(&params, n_encoder)?;
    let mut tuned = model.clone();
    tuned.params = enc;
    Ok(FinetuneReport {
        finetuned: Finetuned {
            model: tuned,
            head,
            alpha,
            target: cfg.target,
            scope: cfg.scope,
        },
        epoch_mse,
        final_mse,
        pairs: pairs.len(),
    })
}

/// Row-wise copy of a square matrix with the diagonal removed.
pub fn drop_diagonal(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect())
        .collect()
}

/// HR@k and R5@20 of ranking `test` against itself (self excluded) by the
/// pretrained embedding L1 distance.
pub fn embedding_metrics(model: &Model, test: &[Trajectory], truth: &[Vec<f64>], ks: &[usize]) -> Result<(BTreeMap<usize, f64>, Option<f64>)> {
    let h = model.embed(test, 64)?;
    let pred: Vec<Vec<f64>> = h.iter().map(|a| h.iter().map(|b| l1(a, b)).collect()).collect();
    ranking_metrics(&drop_diagonal(&pred), &drop_diagonal(truth), ks)
}

/// Same metrics ranked by the fine-tuned similarity (descending).
pub fn finetuned_metrics(ft: &Finetuned, test: &[Trajectory], truth: &[Vec<f64>], ks: &[usize]) -> Result<(BTreeMap<usize, f64>, Option<f64>)> {
    let s = ft.predict(test, test)?;
    let pred: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    ranking_metrics(&drop_diagonal(&pred), &drop_diagonal(truth), ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_degenerate_error() {
        let l = normalized_labels(&[0.0, 2.0], 2.0);
        assert_eq!(l[0], 1.0);
        assert!((l[1] - (-1f64).exp()).abs() < 1e-15);
        assert!(mean_distance(&[3.0, 3.0, 3.0]).is_err());
        assert!(mean_distance(&[1.0, f64::NAN]).is_err());
        assert_eq!(mean_distance(&[1.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn scope_membership() {
        assert!(in_scope(Scope::LastLayerHead, 2, "head.w1"));
        assert!(in_scope(Scope::LastLayerHead, 2, "layers.1.attn.wq"));
        assert!(!in_scope(Scope::LastLayerHead, 2, "layers.0.attn.wq"));
        assert!(!in_scope(Scope::LastLayerHead, 12, "layers.1.attn.wq"));
        assert!(in_scope(Scope::All, 2, "layers.0.attn.wq"));
        assert!(!in_scope(Scope::All, 2, "proj.w1"));
    }

    #[test]
    fn pairs_are_stratified() {
        let n = 101;
        let dist: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i as f64 - j as f64).abs()).collect()).collect();
        let pairs = sample_pairs(&dist, 20, &mut derived_rng(1, 0)).unwrap();
        assert_eq!(pairs.len(), n * 20);
        for a in 0..n {
            let mine: Vec<usize> = pairs.iter().filter(|p| p.0 == a).map(|p| p.1).collect();
            let uniq: std::collections::HashSet<_> = mine.iter().collect();
            assert_eq!(uniq.len(), 20);
            assert!(!mine.contains(&a));
            let mut others: Vec<usize> = (0..n).filter(|&j| j != a).collect();
            others.sort_by(|&x, &y| dist[a][x].total_cmp(&dist[a][y]).then(x.cmp(&y)));
            for k in 0..10 {
                let decile = &others[k * 100 / 10..(k + 1) * 100 / 10];
                assert_eq!(mine.iter().filter(|j| decile.contains(j)).count(), 2);
            }
        }
        let small = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(sample_pairs(&small, 20, &mut derived_rng(1, 0)).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn config_validation() {
        assert!(FinetuneConfig::default().validate().is_ok());
        assert!(FinetuneConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(FinetuneConfig { alpha: Some(-1.0), ..Default::default() }.validate().is_err());
        assert_eq!("all".parse::<Scope>().unwrap(), Scope::All);
    }
}
