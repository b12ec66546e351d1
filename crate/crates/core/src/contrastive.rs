//! Momentum-contrast pretraining: two augmented views per trajectory, an
//! online and a momentum encoder, a FIFO queue of negatives and InfoNCE.
//!
//! Step order inside a batch: views, online forward (train mode), momentum
//! forward (eval mode, no gradients), loss, backward, Adam on the online
//! parameters, momentum update, then the batch's momentum projections enter
//! the queue. Each epoch draws from its own RNG derived from `(seed, epoch)`
//! so a resumed run replays the remaining epochs exactly.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig, Method};
use crate::binfmt::Checkpoint;
use crate::encoder::{encode, encode_graph, Bound, Ctx, Enriched, Model, ParamSet};
use crate::error::{Error, Result};
use crate::geo::Trajectory;
use crate::grid::derived_rng;
use crate::numerics::{AdamState, Graph, Real, Tensor, Var};

const EPOCH_STREAM: u64 = 0x00E9_0C00;
const QUEUE_STREAM: u64 = 0x0051_EE00;
const VALID_STREAM: u64 = 0x0007_A11D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub queue_size: usize,
    pub temperature: f64,
    pub momentum: f64,
    pub lr: f64,
    /// The learning rate halves after every this many epochs.
    pub lr_halve_every: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Augmentation feeding the online encoder.
    pub view_online: AugmentConfig,
    /// Augmentation feeding the momentum encoder.
    pub view_momentum: AugmentConfig,
    /// Also use the other rows' momentum projections of the current batch as negatives.
    pub batch_negatives: bool,
    /// Fill the queue with random unit vectors before the first step.
    pub warm_queue: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            queue_size: 2048,
            temperature: 0.07,
            momentum: 0.999,
            lr: 0.001,
            lr_halve_every: 5,
            max_epochs: 20,
            patience: 5,
            seed: 0,
            view_online: AugmentConfig::with_method(Method::Mask),
            view_momentum: AugmentConfig::with_method(Method::Truncate),
            batch_negatives: false,
            warm_queue: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.queue_size % self.batch_size != 0 {
            return Err(Error::config(format!(
                "queue_size {} must be a multiple of batch_size {}",
                self.queue_size, self.batch_size
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config(format!("momentum must lie in (0, 1), got {}", self.momentum)));
        }
        if !(self.lr > 0.0) || self.lr_halve_every == 0 {
            return Err(Error::config("lr and lr_halve_every must be positive"));
        }
        self.view_online.validate()?;
        self.view_momentum.validate()
    }

    /// Learning rate of 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halve_every) as i32)
    }
}

/// Bounded FIFO of momentum-side projections.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    pub capacity: usize,
    pub dim: usize,
    rows: VecDeque<Vec<f32>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeQueue {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    /// Full queue of independent random unit vectors.
    pub fn warm<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Self {
        let mut q = NegativeQueue::new(capacity, dim);
        for _ in 0..capacity {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.rows.push_back(v.iter().map(|x| (x / n) as f32).collect());
        }
        q
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends every row of `z` (`[B, dim]`), evicting the oldest beyond capacity.
    pub fn enqueue(&mut self, z: &Tensor<f32>) -> Result<()> {
        if z.last_dim() != self.dim {
            return Err(Error::Shape {
                op: "enqueue",
                lhs: z.shape.clone(),
                rhs: vec![self.dim],
            });
        }
        for r in 0..z.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            if self.capacity > 0 {
                self.rows.push_back(z.row(r).to_vec());
            }
        }
        Ok(())
    }

    /// Oldest first, `[len, dim]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor {
            shape: vec![self.rows.len(), self.dim],
            data: self.rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_tensor(capacity: usize, t: &Tensor<f32>) -> Result<Self> {
        let dim = t.last_dim();
        if t.shape.len() != 2 || t.rows() > capacity {
            return Err(Error::Format(format!("queue tensor {:?} exceeds capacity {capacity}", t.shape)));
        }
        let mut q = NegativeQueue::new(capacity, dim);
        q.rows = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
        Ok(q)
    }
}

fn require_nonzero_rows<F: Real>(t: &Tensor<F>, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        if t.row(r).iter().all(|v| *v == F::zero()) {
            return Err(Error::Numeric(format!("zero-norm vector in {what} row {r}")));
        }
    }
    Ok(())
}

/// InfoNCE on the graph. `z` is differentiable; `z_prime` and `queue` enter
/// as constants. Logits are `[cos(z_k, z′_k), cos(z_k, q_1..q_K)] / τ` with
/// target column 0; with `batch_negatives` the other rows' `z′` are
/// appended as further negatives.
pub fn infonce_graph<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    z_prime: &Tensor<F>,
    queue: &Tensor<F>,
    temperature: f64,
    batch_negatives: bool,
) -> Result<Var> {
    require_nonzero_rows(g.value(z), "z")?;
    require_nonzero_rows(z_prime, "z'")?;
    require_nonzero_rows(queue, "queue")?;
    let b = g.value(z).rows();
    let zp = g.constant(z_prime.clone());
    let pos = g.cosine_rows(z, zp)?;
    let mut logits = g.reshape(pos, &[b, 1])?;
    if queue.rows() > 0 {
        let q = g.constant(queue.clone());
        let neg = g.cosine_similarity(z, q)?;
        logits = g.concat_last_dim(logits, neg)?;
    }
    if batch_negatives && b > 1 {
        let cross = g.cosine_similarity(z, zp)?;
        // the diagonal holds the positives; push them out of the softmax
        let mut off = Tensor::<F>::zeros(&[b, b]);
        for i in 0..b {
            off.data[i * b + i] = F::of(-1e9);
        }
        let off = g.constant(off);
        let cross = g.add(cross, off)?;
        logits = g.concat_last_dim(logits, cross)?;
    }
    let logits = g.scale(logits, 1.0 / temperature);
    g.softmax_cross_entropy(logits, &vec![0; b])
}

/// Scalar InfoNCE value for plain tensors.
pub fn infonce_loss<F: Real>(z: &Tensor<F>, z_prime: &Tensor<F>, queue: &Tensor<F>, temperature: f64) -> Result<f64> {
    if z.shape != z_prime.shape || (queue.rows() > 0 && queue.last_dim() != z.last_dim()) {
        return Err(Error::Shape {
            op: "infonce",
            lhs: z.shape.clone(),
            rhs: z_prime.shape.clone(),
        });
    }
    let mut g = Graph::<F>::new();
    let zv = g.constant(z.clone());
    let l = infonce_graph(&mut g, zv, z_prime, queue, temperature, false)?;
    Ok(g.value(l).data[0].f64())
}

/// `θ′ ← m·θ′ + (1−m)·θ` for every tensor.
pub fn momentum_update(online: &ParamSet, momentum: &mut ParamSet, m: f64) -> Result<()> {
    if !online.same_layout(momentum) {
        return Err(Error::input("online and momentum parameter layouts differ"));
    }
    let (a, b) = (m as f32, (1.0 - m) as f32);
    for (tm, to) in momentum.tensors.iter_mut().zip(&online.tensors) {
        for (x, &y) in tm.data.iter_mut().zip(&to.data) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

/// Stops once the monitored loss failed to improve on its best for
/// `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| loss < b);
        if improved {
            self.best = Some(loss);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Everything that evolves during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub online: ParamSet,
    pub momentum: ParamSet,
    pub queue: NegativeQueue,
    pub adam: AdamState,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub step: u64,
    pub stopper: EarlyStopper,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
}

impl TrainState {
    /// Online parameters copied from `model`, momentum side a clone of them.
    pub fn new(model: &Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = model.config.d_proj();
        let queue = if cfg.warm_queue {
            NegativeQueue::warm(cfg.queue_size, dim, &mut derived_rng(cfg.seed, QUEUE_STREAM))
        } else {
            NegativeQueue::new(cfg.queue_size, dim)
        };
        Ok(TrainState {
            online: model.params.clone(),
            momentum: model.params.clone(),
            queue,
            adam: AdamState::new(&model.params.tensors),
            epoch: 0,
            step: 0,
            stopper: EarlyStopper::new(cfg.patience),
            history: Vec::new(),
            stopped: false,
        })
    }
}

fn views_of<R: Rng>(
    model: &Model,
    trajs: &[&Trajectory],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<Enriched>, Vec<Enriched>)> {
    let mut a = Vec::with_capacity(trajs.len());
    let mut b = Vec::with_capacity(trajs.len());
    for t in trajs {
        let (va, vb) = make_views(t, &cfg.view_online, &cfg.view_momentum, rng)?;
        a.push(model.enrich(&va)?);
        b.push(model.enrich(&vb)?);
    }
    Ok((a, b))
}

/// One optimization step on a batch; returns its loss.
pub fn train_step<R: Rng>(
    model: &Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[&Trajectory],
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let (va, vb) = views_of(model, batch, cfg, rng)?;
    let fa = model.batch(&va.iter().collect::<Vec<_>>())?;
    let fb = model.batch(&vb.iter().collect::<Vec<_>>())?;

    let (_, z_prime) = encode(&model.config, &state.momentum, &fb, false, rng)?;

    let mut g = Graph::<f32>::new();
    let bound = Bound::new(&mut g, &state.online, |_| true);
    let mut ctx = Ctx {
        train: true,
        dropout: model.config.dropout,
        rng,
    };
    let out = encode_graph(&mut g, &model.config, &bound, &fa, &mut ctx)?;
    let queue = state.queue.to_tensor();
    let loss = infonce_graph(&mut g, out.z, &z_prime, &queue, cfg.temperature, cfg.batch_negatives)?;
    let value = g.value(loss).data[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}", state.step)));
    }
    g.backward(loss)?;
    let grads: Vec<Option<Tensor<f32>>> = bound.vars.iter().map(|&v| g.grad(v)).collect();
    state.adam.step(&mut state.online.tensors, &grads, lr)?;
    momentum_update(&state.online, &mut state.momentum, cfg.momentum)?;
    state.queue.enqueue(&z_prime)?;
    state.step += 1;
    Ok(value)
}

/// One pass over `train` in a seed-and-epoch-determined order; returns the
/// mean batch loss and advances `state.epoch`.
pub fn train_epoch(model: &Model, state: &mut TrainState, cfg: &TrainConfig, train: &[Trajectory]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let mut rng: ChaCha8Rng = derived_rng(cfg.seed ^ EPOCH_STREAM, state.epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let lr = cfg.lr_at(state.epoch);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &train[i]).collect();
        total += train_step(model, state, cfg, &batch, lr, &mut rng)?;
        batches += 1;
    }
    state.epoch += 1;
    Ok(total / batches as f64)
}

/// InfoNCE over `data` with both encoders in eval mode and the queue frozen.
/// Views come from a fixed stream so epochs are comparable.
pub fn validation_loss(model: &Model, state: &TrainState, cfg: &TrainConfig, data: &[Trajectory]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("empty validation set"));
    }
    let mut rng = derived_rng(cfg.seed, VALID_STREAM);
    let queue = state.queue.to_tensor();
    let refs: Vec<&Trajectory> = data.iter().collect();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in refs.chunks(cfg.batch_size) {
        let (va, vb) = views_of(model, chunk, cfg, &mut rng)?;
        let fa = model.batch(&va.iter().collect::<Vec<_>>())?;
        let fb = model.batch(&vb.iter().collect::<Vec<_>>())?;
        let (_, z) = encode(&model.config, &state.online, &fa, false, &mut rng)?;
        let (_, zp) = encode(&model.config, &state.momentum, &fb, false, &mut rng)?;
        total += infonce_loss(&z, &zp, &queue, cfg.temperature)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Metadata stored next to the tensors of a training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub adam_step: u64,
    pub stopper: EarlyStopper,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
}

/// Model checkpoint extended with the momentum encoder, optimizer moments
/// and queue, enough for a bit-exact resume.
pub fn training_checkpoint(model: &Model, state: &TrainState, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut m = model.clone();
    m.params = state.online.clone();
    let meta = TrainMeta {
        config: cfg.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_step: state.adam.step,
        stopper: state.stopper.clone(),
        history: state.history.clone(),
        stopped: state.stopped,
    };
    let mut ck = m.to_checkpoint("pretrain")?;
    ck.meta["train"] = serde_json::to_value(&meta)?;
    for (n, t) in state.momentum.names.iter().zip(&state.momentum.tensors) {
        ck.push(format!("momentum.{n}"), t.clone());
    }
    for (n, t) in state.online.names.iter().zip(&state.adam.m) {
        ck.push(format!("adam.m.{n}"), t.clone());
    }
    for (n, t) in state.online.names.iter().zip(&state.adam.v) {
        ck.push(format!("adam.v.{n}"), t.clone());
    }
    ck.push("queue", state.queue.to_tensor());
    Ok(ck)
}

/// Inverse of [`training_checkpoint`].
pub fn resume_from(ck: &Checkpoint) -> Result<(Model, TrainState, TrainConfig)> {
    let model = Model::from_checkpoint(ck)?;
    let meta: TrainMeta = serde_json::from_value(
        ck.meta
            .get("train")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no training state".into()))?,
    )?;
    let pick = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
        let named = ck.with_prefix(prefix);
        model
            .params
            .names
            .iter()
            .map(|n| {
                named
                    .iter()
                    .find(|(k, _)| k == n)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks '{prefix}{n}'")))
            })
            .collect()
    };
    let momentum = ParamSet::new(model.params.names.clone(), pick("momentum.")?)?;
    let mut adam = AdamState::new(&model.params.tensors);
    adam.m = pick("adam.m.")?;
    adam.v = pick("adam.v.")?;
    adam.step = meta.adam_step;
    let queue_t = ck.tensor("queue").ok_or_else(|| Error::Format("checkpoint lacks the queue".into()))?;
    let mut queue = NegativeQueue::from_tensor(meta.config.queue_size, queue_t)?;
    queue.dim = model.config.d_proj();
    let state = TrainState {
        online: model.params.clone(),
        momentum,
        queue,
        adam,
        epoch: meta.epoch,
        step: meta.step,
        stopper: meta.stopper,
        history: meta.history,
        stopped: meta.stopped,
    };
    Ok((model, state, meta.config))
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub state: TrainState,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Trains until `max_epochs` or early stopping. Early stopping watches the
/// validation loss when `val` is non-empty, else the training loss. With an
/// `out_dir`, `best.ckpt` is rewritten on every improvement and
/// `final.ckpt` after every epoch.
pub fn fit(
    model: &Model,
    mut state: TrainState,
    cfg: &TrainConfig,
    train: &[Trajectory],
    val: &[Trajectory],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitReport> {
    cfg.validate()?;
    let start = state.epoch;
    let best_path = out_dir.map(|d| d.join("best.ckpt"));
    let final_path = out_dir.map(|d| d.join("final.ckpt"));
    while state.epoch < cfg.max_epochs && !state.stopped {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        let train_loss = train_epoch(model, &mut state, cfg, train)?;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(validation_loss(model, &state, cfg, val)?)
        };
        let decision = state.stopper.observe(epoch, val_loss.unwrap_or(train_loss));
        state.stopped = decision.stop;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        on_epoch(&rec);
        state.history.push(rec);
        if let (true, Some(p)) = (decision.improved, &best_path) {
            training_checkpoint(model, &state, cfg)?.save(p)?;
        }
        if let Some(p) = &final_path {
            training_checkpoint(model, &state, cfg)?.save(p)?;
        }
    }
    Ok(FitReport {
        epochs_run: state.epoch - start,
        stopped_early: state.stopped,
        state,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}
