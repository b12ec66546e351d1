//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Set `ACCEPTANCE_ONLY=1,5,9` to run a subset.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::*;
use trajsim::augment::{masked_len, point_mask, point_shift, simplify_dp_indices, truncate};
use trajsim::binfmt::Checkpoint;
use trajsim::contrastive::{
    fit, infonce_loss, momentum_update, resume_from, train_step, training_checkpoint, NegativeQueue, TrainConfig,
    TrainState,
};
use trajsim::encoder::{encode, encode_graph, init_params, Bound, Ctx, EncoderConfig, FeatureBatch, Model, ParamSet,
    Standardization};
use trajsim::eval::{distort, downsample, make_query_db, mean_rank, QueryDb};
use trajsim::finetune::{embedding_metrics, finetune, finetuned_metrics, FinetuneConfig, Scope};
use trajsim::geo::{preprocess_filter, Trajectory};
use trajsim::grid::{derived_rng, embed_cells, CellGraph, Grid, SkipGramConfig};
use trajsim::measures::{edr, frechet_discrete, hausdorff, pairwise_matrix, MeasureKind};
use trajsim::numerics::{gradient_check, AdamState, Graph, Mask, Tensor, Var};
use trajsim::search::{build_ivf, default_k_c, knn_flat, knn_ivf, recall, EmbeddingStore};
use trajsim::synth::{generate, SynthConfig};

// Tolerances and budgets pinned by the acceptance criteria.
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOL: f64 = 1e-9;
const SHIFT_SAMPLES: usize = 100_000;
const INFONCE_QUEUE: usize = 2048;
const INFONCE_REL_TOL: f64 = 0.10;
const MOMENTUM: f64 = 0.999;
const DESK_MAX_EPOCHS: usize = 15;
const DESK_MEAN_RANK_MAX: f64 = 10.0;
const UNTRAINED_BAND: f64 = 0.20;
const ROBUST_FACTOR: f64 = 5.0;
const UNTRAINED_FACTOR: f64 = 10.0;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const IVF_RECALL_MIN: f64 = 0.8;
const FINETUNE_BUDGET: Duration = Duration::from_secs(10 * 60);
const COMPLEXITY_RATIO: f64 = 3.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- criterion 1

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted(g: &mut Graph<f64>, v: Var) -> Var {
    let t = g.value(v).clone();
    let w: Vec<f64> = (0..t.len()).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect();
    let c = g.constant(Tensor::new(t.shape.clone(), w).unwrap());
    let p = g.mul(v, c).unwrap();
    g.sum(p)
}

type OpCheck = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> trajsim::Result<Var>>);

fn op_checks() -> Vec<OpCheck> {
    let mut kinked = rnd(&[12], 11);
    kinked.data.iter_mut().for_each(|v| *v += 0.1 * v.signum());
    let target = rnd(&[6], 25).data;
    vec![
        ("matmul", vec![rnd(&[2, 3, 4], 1), rnd(&[4, 5], 2)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(weighted(g, y))
        })),
        ("bmm+transpose", vec![rnd(&[2, 3, 4], 3), rnd(&[2, 5, 4], 4)], Box::new(|g, v| {
            let t = g.transpose_last2(v[1])?;
            let y = g.bmm(v[0], t)?;
            Ok(weighted(g, y))
        })),
        ("add/sub/mul/bias/scale", vec![rnd(&[3, 4], 5), rnd(&[3, 4], 6), rnd(&[4], 7), rnd(&[1], 8)], Box::new(|g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let b = g.add_bias(m, v[2])?;
            let c = g.scale(b, 1.7);
            let d = g.scale_by(c, v[3])?;
            Ok(weighted(g, d))
        })),
        ("concat/exp/row_mean", vec![rnd(&[2, 3], 9), rnd(&[2, 2], 10)], Box::new(|g, v| {
            let c = g.concat_last_dim(v[0], v[1])?;
            let e = g.exp(c);
            let r = g.row_mean(e);
            Ok(weighted(g, r))
        })),
        ("abs/relu", vec![kinked], Box::new(|g, v| {
            let a = g.abs(v[0]);
            let r = g.relu(v[0]);
            let s = g.add(a, r)?;
            Ok(weighted(g, s))
        })),
        ("masked softmax", vec![rnd(&[2, 3, 4], 12)], Box::new(|g, v| {
            let m = Mask::from_lengths(&[4, 2], 4);
            let s = g.softmax_last_dim(v[0], Some(&m))?;
            Ok(weighted(g, s))
        })),
        ("layer_norm", vec![rnd(&[3, 6], 13), rnd(&[6], 14), rnd(&[6], 15)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            Ok(weighted(g, y))
        })),
        ("dropout", vec![rnd(&[20], 16)], Box::new(|g, v| {
            let y = g.dropout(v[0], 0.3, &mut rng(99), true)?;
            Ok(weighted(g, y))
        })),
        ("heads/mean_pool", vec![rnd(&[2, 4, 6], 17)], Box::new(|g, v| {
            let m = Mask::from_lengths(&[3, 1], 4);
            let s = g.split_heads(v[0], 3)?;
            let r = g.merge_heads(s, 3)?;
            let p = g.mean_pool_rows(r, &m)?;
            Ok(weighted(g, p))
        })),
        ("l1_distance", vec![rnd(&[3, 5], 18), rnd(&[3, 5], 19)], Box::new(|g, v| {
            let l = g.l1_distance(v[0], v[1])?;
            Ok(weighted(g, l))
        })),
        ("cosine", vec![rnd(&[3, 5], 20), rnd(&[4, 5], 21)], Box::new(|g, v| {
            let c = g.cosine_similarity(v[0], v[1])?;
            Ok(weighted(g, c))
        })),
        ("cosine_rows", vec![rnd(&[3, 5], 22), rnd(&[3, 5], 23)], Box::new(|g, v| {
            let c = g.cosine_rows(v[0], v[1])?;
            Ok(weighted(g, c))
        })),
        ("select_rows", vec![rnd(&[4, 3], 31)], Box::new(|g, v| {
            let s = g.select_rows(v[0], &[2, 0, 2, 3])?;
            Ok(weighted(g, s))
        })),
        ("cross_entropy", vec![rnd(&[4, 5], 24)], Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 3, 4, 1]))),
        ("mse", vec![rnd(&[2, 3], 26)], Box::new(move |g, v| g.mse(v[0], &target))),
        ("reshape/mean", vec![rnd(&[2, 3], 27)], Box::new(|g, v| {
            let r = g.reshape(v[0], &[3, 2])?;
            Ok(g.mean(r))
        })),
    ]
}

fn encoder_gradient_error() -> f64 {
    let (trajs, base) = tiny_setup(6, 21, 16, 1);
    let cfg = EncoderConfig { heads: 2, heads_s: 2, layers: 1, dropout: 0.0, ..base.config.clone() };
    let mut params = init_params(&cfg).unwrap();
    params.get_mut("layers.0.gamma").unwrap().data[0] = 0.8;
    let model = Model { config: cfg.clone(), params: params.clone(), ..base };
    let short = |t: &Trajectory, n: usize| t.with_points(t.points[..n].to_vec());
    let e1 = model.enrich(&short(&trajs[0], 8)).unwrap();
    let e2 = model.enrich(&short(&trajs[1], 5)).unwrap();
    let batch = FeatureBatch::<f64>::from_enriched(&[&e1, &e2], cfg.d_t, 8).unwrap();
    let inputs: Vec<Tensor<f64>> = params.tensors.iter().map(|t| t.cast()).collect();
    gradient_check(&inputs, 1e-5, |g, vars| {
        let p = Bound::with_vars(&params, vars.to_vec());
        let mut r = rng(0);
        let mut ctx = Ctx { train: false, dropout: 0.0, rng: &mut r };
        let out = encode_graph(g, &cfg, &p, &batch, &mut ctx)?;
        let w: Vec<f64> = (0..2 * cfg.d_proj()).map(|i| (i as f64 * 0.7).cos()).collect();
        let c = g.constant(Tensor::new(vec![2, cfg.d_proj()], w)?);
        let zc = g.mul(out.z, c)?;
        Ok(g.sum(zc))
    })
    .unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (name, inputs, f) in op_checks() {
        let e = gradient_check(&inputs, 1e-5, f).unwrap();
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let enc = encoder_gradient_error();
    let secs = start.elapsed();
    let pass = worst.0 < GRAD_REL_TOL && enc < GRAD_REL_TOL && secs < GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "gradient checks: worst op rel err {:.2e} ({}), full encoder {:.2e}, tol {GRAD_REL_TOL:e}, {:.1}s",
            worst.0,
            worst.1,
            enc,
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut edr_mismatch = 0;
    for _ in 0..100 {
        let (n, m) = (r.random_range(1..=20), r.random_range(1..=20));
        let a = random_points(&mut r, n, 500.0);
        let b = random_points(&mut r, m, 500.0);
        worst = worst.max((hausdorff(&a, &b).unwrap() - hausdorff_brute(&a, &b)).abs());
        worst = worst.max((frechet_discrete(&a, &b).unwrap() - frechet_memo(&a, &b)).abs());
        if edr(&a, &b, 100.0).unwrap() != edr_memo(&a, &b, 100.0) {
            edr_mismatch += 1;
        }
    }
    outcome(
        worst <= ORACLE_TOL && edr_mismatch == 0,
        format!("measures vs oracles on 100 pairs: max abs err {worst:.1e} (tol {ORACLE_TOL:e}), EDR mismatches {edr_mismatch}"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut r = rng(102);
    let (mut diff, mut outside) = (0, 0);
    for k in 0..500 {
        let n = r.random_range(2..=80);
        let t = random_walk(&mut r, "t", n, 80.0);
        let eps = [5.0, 30.0, 100.0][k % 3];
        let got = simplify_dp_indices(&t.points, eps);
        if got != dp_recursive(&t.points, eps) {
            diff += 1;
        }
        for w in got.windows(2) {
            for i in w[0] + 1..w[1] {
                if seg_dist(t.points[i], t.points[w[0]], t.points[w[1]]) > eps {
                    outside += 1;
                }
            }
        }
    }
    outcome(
        diff == 0 && outside == 0,
        format!("simplification on 500 trajectories: {diff} differ from recursive oracle, {outside} removed points beyond tolerance"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut r = rng(103);
    let mut mask_bad = 0;
    let mut trunc_bad = 0;
    for k in 0..2000 {
        let n = r.random_range(4..=120);
        let t = random_walk(&mut r, &format!("t{k}"), n, 50.0);
        let rho_d = r.random_range(0.05..0.6);
        if masked_len(n, rho_d) >= 2 {
            let m = point_mask(&t, rho_d, &mut r).unwrap();
            if m.len() != ((1.0 - rho_d) * n as f64 + 1e-9).floor() as usize {
                mask_bad += 1;
            }
        }
        let rho_b = r.random_range(0.3..0.95);
        if let Ok(v) = truncate(&t, rho_b, &mut r) {
            let start = t.points.iter().position(|p| *p == v.points[0]);
            let contiguous = start.is_some_and(|s| t.points.get(s..s + v.len()) == Some(&v.points[..]));
            if !contiguous {
                trunc_bad += 1;
            }
        }
    }
    let rho_m = 100.0;
    let t = Trajectory::new("s", vec![trajsim::geo::Point::new(0.0, 0.0); 2]);
    let mut offsets = Vec::with_capacity(SHIFT_SAMPLES);
    while offsets.len() < SHIFT_SAMPLES {
        let s = point_shift(&t, rho_m, 0.5, &mut r).unwrap();
        for p in &s.points {
            offsets.push(p.x);
            offsets.push(p.y);
        }
    }
    offsets.truncate(SHIFT_SAMPLES);
    let n = offsets.len() as f64;
    let bound_ok = offsets.iter().all(|o| o.abs() <= rho_m);
    let mean = offsets.iter().sum::<f64>() / n;
    let sd = (offsets.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let z = mean / (sd / n.sqrt());
    outcome(
        mask_bad == 0 && trunc_bad == 0 && bound_ok && z.abs() <= 3.0,
        format!(
            "mask size errors {mask_bad}, non-contiguous truncations {trunc_bad}, shift bound held: {bound_ok}, \
             shift mean {mean:.3} m ({z:+.2} sigma over {SHIFT_SAMPLES} samples)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn unit_rows(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
    NegativeQueue::warm(rows, d, &mut rng(seed)).to_tensor().cast()
}

fn criterion_5() -> Outcome {
    let d = EncoderConfig::default().d_proj();
    let tau = TrainConfig::default().temperature;
    let (z, zp, q) = (unit_rows(512, d, 1), unit_rows(512, d, 2), unit_rows(INFONCE_QUEUE, d, 3));
    let loss = infonce_loss(&z, &zp, &q, tau).unwrap();
    let target = ((INFONCE_QUEUE + 1) as f64).ln();
    let rel = (loss - target).abs() / target;
    let scaled = |t: &Tensor<f64>, c: f64| Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * c).collect()).unwrap();
    let mut exact = true;
    let mut worst = 0.0f64;
    for c in [0.25, 4.0, 3.7, 1e-3] {
        let l = infonce_loss(&scaled(&z, c), &scaled(&zp, c), &scaled(&q, c), tau).unwrap();
        if c.log2().fract() == 0.0 {
            exact &= l == loss;
        }
        worst = worst.max((l - loss).abs());
    }
    outcome(
        rel <= INFONCE_REL_TOL && exact && worst <= 1e-12,
        format!(
            "initial loss {loss:.4} vs ln(N+1) = {target:.4} (rel {:.1}%, tol {:.0}%, d={d}, tau={tau}); \
             rescaling: power-of-two exact {exact}, max diff {worst:.1e}",
            rel * 100.0,
            INFONCE_REL_TOL * 100.0
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let mut r = rng(104);
    let mk = |r: &mut ChaCha8Rng| {
        let t: Vec<Tensor<f32>> = [vec![7, 5], vec![11]]
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| r.random_range(-2.0f32..2.0)).collect()).unwrap()
            })
            .collect();
        ParamSet::new(vec!["a".into(), "b".into()], t).unwrap()
    };
    let online = mk(&mut r);
    let mut mom = mk(&mut r);
    let before = mom.clone();
    momentum_update(&online, &mut mom, MOMENTUM).unwrap();
    let mut worst_ulps = 0.0f64;
    for ((after, old), on) in mom.tensors.iter().zip(&before.tensors).zip(&online.tensors) {
        for ((&a, &o), &x) in after.data.iter().zip(&old.data).zip(&on.data) {
            let want = MOMENTUM * o as f64 + (1.0 - MOMENTUM) * x as f64;
            let ulp = (want.abs().max(f32::MIN_POSITIVE as f64)) * f32::EPSILON as f64;
            worst_ulps = worst_ulps.max((a as f64 - want).abs() / ulp);
        }
    }

    // one real optimizer step: the momentum side must equal the update rule
    // applied to its previous value, bit for bit
    let (trajs, model) = tiny_setup(16, 7, 16, 1);
    let cfg = TrainConfig { batch_size: 8, queue_size: 16, seed: 3, ..TrainConfig::default() };
    let mut state = TrainState::new(&model, &cfg).unwrap();
    let mut warm = rng(1);
    let batch: Vec<&Trajectory> = trajs.iter().take(8).collect();
    train_step(&model, &mut state, &cfg, &batch, cfg.lr, &mut warm).unwrap();
    let online_before = state.online.clone();
    let mom_before = state.momentum.clone();
    train_step(&model, &mut state, &cfg, &batch, cfg.lr, &mut warm).unwrap();
    let mut expected = mom_before.clone();
    momentum_update(&state.online, &mut expected, cfg.momentum).unwrap();
    let checksum = |p: &ParamSet| p.tensors.iter().flat_map(|t| t.data.iter()).fold(0u64, |h, v| {
        h.rotate_left(5) ^ u64::from(v.to_bits())
    });
    let optimizer_clean = checksum(&expected) == checksum(&state.momentum) && expected == state.momentum;
    let online_moved = online_before != state.online;

    // the optimizer itself cannot reach a tensor it was not handed
    let mut adam = AdamState::new(&online_before.tensors);
    let mut shadow = online_before.tensors.clone();
    let grads: Vec<Option<Tensor<f32>>> = shadow.iter().map(|t| Some(Tensor::filled(&t.shape, 1.0))).collect();
    let mom_sum = checksum(&state.momentum);
    adam.step(&mut shadow, &grads, 1e-3).unwrap();
    let untouched = checksum(&state.momentum) == mom_sum;

    outcome(
        worst_ulps <= 1.0 && optimizer_clean && online_moved && untouched,
        format!(
            "update vs f64 reference: max {worst_ulps:.2} f32 ulp; momentum side after a training step matches the rule \
             bit for bit: {optimizer_clean}; checksum untouched by optimizer: {untouched}"
        ),
    )
}

// ----------------------------------------------------- criteria 7, 8 and 10

struct Desk {
    trajs: Vec<Trajectory>,
    untrained: Model,
    trained: Model,
    epochs: usize,
    pretrain_secs: f64,
    build_secs: f64,
}

fn desk_setup() -> Desk {
    let start = Instant::now();
    let raw = generate(&SynthConfig { n: 500, seed: 1, ..SynthConfig::default() }).unwrap();
    let trajs = preprocess_filter(&raw, 20, 200);
    let grid = Grid::covering(&trajs, 200.0).unwrap();
    let cells = grid.active_cells(&trajs).unwrap();
    let graph = CellGraph::over_cells(&grid, &cells);
    let sg = SkipGramConfig { dim: 64, walks_per_node: 4, walk_len: 40, epochs: 2, seed: 1, ..SkipGramConfig::default() };
    let table = embed_cells(&graph, &sg).unwrap().table;
    let ecfg = EncoderConfig { d_t: 64, heads: 4, heads_s: 4, layers: 2, seed: 1, ..EncoderConfig::default() };
    let st = Standardization::fit(&trajs, ecfg.length_scale).unwrap();
    let untrained = Model::new(ecfg, grid, table, st).unwrap();
    let build_secs = start.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let tcfg = TrainConfig {
        max_epochs: 12,
        batch_size: 64,
        queue_size: 512,
        momentum: 0.99,
        seed: 1,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&untrained, &tcfg).unwrap();
    let rep = fit(&untrained, state, &tcfg, &trajs, &[], None, |_| {}).unwrap();
    let mut trained = untrained.clone();
    trained.params = rep.state.online.clone();
    Desk {
        trajs,
        untrained,
        trained,
        epochs: rep.epochs_run,
        pretrain_secs: t0.elapsed().as_secs_f64(),
        build_secs,
    }
}

fn perturbed(qdb: &QueryDb, f: impl Fn(&Trajectory, &mut ChaCha8Rng) -> Trajectory, seed: u64) -> QueryDb {
    let mut r = rng(seed);
    QueryDb {
        queries: qdb.queries.iter().map(|t| f(t, &mut r)).collect(),
        database: qdb.database.iter().map(|t| f(t, &mut r)).collect(),
        truth: qdb.truth.clone(),
    }
}

struct RankRow {
    trained: f64,
    untrained: f64,
}

fn ranks(desk: &Desk, qdb: &QueryDb) -> RankRow {
    RankRow {
        trained: mean_rank(&desk.trained, qdb, 64).unwrap(),
        untrained: mean_rank(&desk.untrained, qdb, 64).unwrap(),
    }
}

fn criteria_7_8(desk: &Desk) -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let db_size = 500;
    let qdb = make_query_db(&desk.trajs, 100, db_size, &mut rng(7)).unwrap();
    let clean = ranks(desk, &qdb);
    let eval_secs = t0.elapsed().as_secs_f64();
    let total = desk.build_secs + desk.pretrain_secs + eval_secs;
    let half = db_size as f64 / 2.0;
    let untrained_ok = (clean.untrained - half).abs() <= UNTRAINED_BAND * half;
    let c7 = outcome(
        clean.trained <= DESK_MEAN_RANK_MAX
            && untrained_ok
            && desk.epochs <= DESK_MAX_EPOCHS
            && Duration::from_secs_f64(total) < PIPELINE_BUDGET,
        format!(
            "|D|={db_size}: trained mean rank {:.2} (max {DESK_MEAN_RANK_MAX}), untrained {:.2} (expected {half} +-{:.0}%), \
             {} epochs, pipeline {total:.0}s",
            clean.trained,
            clean.untrained,
            UNTRAINED_BAND * 100.0,
            desk.epochs
        ),
    );

    let down = perturbed(&qdb, |t, r| downsample(t, 0.2, r).unwrap(), 8);
    let dist = perturbed(&qdb, |t, r| distort(t, 0.2, r).unwrap(), 9);
    let rows = [("rho_s=0.2", ranks(desk, &down)), ("rho_d=0.2", ranks(desk, &dist))];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, row) in &rows {
        let within = row.trained <= ROBUST_FACTOR * clean.trained;
        let beats = row.untrained >= UNTRAINED_FACTOR * row.trained;
        pass &= within && beats;
        parts.push(format!(
            "{name}: trained {:.2} ({:.2}x clean, max {ROBUST_FACTOR}x), untrained {:.2} ({:.2}x trained, need {UNTRAINED_FACTOR}x)",
            row.trained,
            row.trained / clean.trained,
            row.untrained,
            row.untrained / row.trained
        ));
    }
    (c7, outcome(pass, parts.join("; ")))
}

fn criterion_10(desk: &Desk) -> Outcome {
    let t0 = Instant::now();
    let pool = &desk.trajs[..200];
    let (train, test) = (&pool[..140], &pool[160..]);
    let kind = MeasureKind::default();
    let d_train = pairwise_matrix(train, train, kind).unwrap();
    let d_test = pairwise_matrix(test, test, kind).unwrap();
    let (pre, _) = embedding_metrics(&desk.trained, test, &d_test, &[5, 20]).unwrap();
    let pre_hr = pre[&5];
    let mut results = Vec::new();
    for scope in [Scope::LastLayerHead, Scope::All] {
        let cfg = FinetuneConfig { scope, epochs: 5, seed: 1, ..FinetuneConfig::default() };
        let rep = finetune(&desk.trained, train, &d_train, &cfg, |_, _| {}).unwrap();
        let (post, _) = finetuned_metrics(&rep.finetuned, test, &d_test, &[5, 20]).unwrap();
        results.push((scope, rep.final_mse, post[&5]));
    }
    let secs = t0.elapsed();
    let (_, mse_last, hr_last) = results[0];
    let (_, mse_all, hr_all) = results[1];
    let pass = hr_last > pre_hr && hr_all > pre_hr && mse_all <= mse_last && secs < FINETUNE_BUDGET;
    outcome(
        pass,
        format!(
            "HR@5 pretrained {pre_hr:.3}, last-layer+head {hr_last:.3}, all layers {hr_all:.3}; \
             training MSE last-layer+head {mse_last:.5}, all layers {mse_all:.5}; {:.0}s",
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn gaussian_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(r)).collect()).collect()
}

fn criterion_9() -> Outcome {
    let (n, d) = (10_000, 32);
    let mut r = rng(105);
    let ids: Vec<String> = (0..n).map(|i| format!("e{i:05}")).collect();
    let rows = gaussian_rows(&mut r, n, d);
    let store = EmbeddingStore::from_rows(ids.clone(), &rows).unwrap();
    let k_c = default_k_c(n);
    let index = build_ivf(&store, k_c, 10, &mut r).unwrap();
    let queries = gaussian_rows(&mut r, 100, d);
    let mut ivf_diff = 0;
    let mut brute_diff = 0;
    for q in &queries {
        let flat = knn_flat(&store, q, 10).unwrap();
        if knn_ivf(&index, &store, q, 10, k_c).unwrap().hits != flat.hits {
            ivf_diff += 1;
        }
        let got: Vec<(String, f64)> = flat.hits.iter().map(|h| (h.id.clone(), h.distance)).collect();
        if got != knn_brute(&ids, &rows, q, 10) {
            brute_diff += 1;
        }
    }

    // 100 well separated blobs
    let centers = gaussian_rows(&mut r, 100, d);
    let clustered: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let c = &centers[i % centers.len()];
            c.iter().map(|&v| { let e: f32 = StandardNormal.sample(&mut r); 4.0 * v + 0.5 * e }).collect::<Vec<f32>>()
        })
        .collect();
    let cstore = EmbeddingStore::from_rows(ids, &clustered).unwrap();
    let cindex = build_ivf(&cstore, k_c, 20, &mut r).unwrap();
    let nprobe = k_c.div_ceil(8);
    let mut total = 0.0;
    let nq = 200;
    for _ in 0..nq {
        let q = cstore.row(r.random_range(0..n)).to_vec();
        let truth = knn_flat(&cstore, &q, 10).unwrap();
        total += recall(&knn_ivf(&cindex, &cstore, &q, 10, nprobe).unwrap(), &truth);
    }
    let rec = total / nq as f64;
    outcome(
        ivf_diff == 0 && brute_diff == 0 && rec >= IVF_RECALL_MIN,
        format!(
            "n={n}, k_c={k_c}: nprobe=k_c differs from flat on {ivf_diff}/100 queries, flat differs from brute force on \
             {brute_diff}/100; clustered recall@10 at nprobe={nprobe}: {rec:.3} (min {IVF_RECALL_MIN})"
        ),
    )
}

// --------------------------------------------------------------- criterion 11

fn ckpt_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut v = Vec::new();
    ck.write_to(&mut v).unwrap();
    v
}

fn store_bytes(s: &EmbeddingStore) -> Vec<u8> {
    let mut v = Vec::new();
    s.write_to(&mut v).unwrap();
    v
}

fn pipeline_artifacts() -> Vec<(&'static str, Vec<u8>)> {
    let (trajs, model) = tiny_setup(40, 31, 16, 1);
    let mut out = vec![
        ("synth", trajsim::io::to_canonical_string(&trajs).into_bytes()),
        ("cells", store_bytes(&model.cells.to_store().unwrap())),
        ("model", ckpt_bytes(&model.to_checkpoint("model").unwrap())),
    ];
    let cfg = TrainConfig { batch_size: 16, queue_size: 64, max_epochs: 3, momentum: 0.99, seed: 2, ..TrainConfig::default() };
    let full = fit(&model, TrainState::new(&model, &cfg).unwrap(), &cfg, &trajs, &[], None, |_| {}).unwrap();
    out.push(("pretrain", ckpt_bytes(&training_checkpoint(&model, &full.state, &cfg).unwrap())));

    let one_cfg = TrainConfig { max_epochs: 1, ..cfg.clone() };
    let one = fit(&model, TrainState::new(&model, &cfg).unwrap(), &one_cfg, &trajs, &[], None, |_| {}).unwrap();
    let saved = ckpt_bytes(&training_checkpoint(&model, &one.state, &cfg).unwrap());
    let (m2, s2, c2) = resume_from(&Checkpoint::read_from(&mut saved.as_slice()).unwrap()).unwrap();
    let resumed = fit(&m2, s2, &c2, &trajs, &[], None, |_| {}).unwrap();
    out.push(("resumed", ckpt_bytes(&training_checkpoint(&m2, &resumed.state, &c2).unwrap())));

    let mut trained = model.clone();
    trained.params = full.state.online.clone();
    let ids: Vec<String> = trajs.iter().map(|t| t.id.clone()).collect();
    let emb = EmbeddingStore::from_rows(ids, &trained.embed(&trajs, 16).unwrap()).unwrap();
    out.push(("embeddings", store_bytes(&emb)));
    let index = build_ivf(&emb, 6, 10, &mut derived_rng(4, 0)).unwrap();
    let mut ib = Vec::new();
    index.write_to(&mut ib).unwrap();
    out.push(("ivf", ib));

    let train = &trajs[..20];
    let dist = pairwise_matrix(train, train, MeasureKind::default()).unwrap();
    let fcfg = FinetuneConfig { epochs: 1, anchors_per_batch: 10, seed: 5, ..FinetuneConfig::default() };
    let rep = finetune(&trained, train, &dist, &fcfg, |_, _| {}).unwrap();
    out.push(("finetune", ckpt_bytes(&rep.finetuned.to_checkpoint().unwrap())));
    out
}

fn criterion_11() -> Outcome {
    let a = pipeline_artifacts();
    let b = pipeline_artifacts();
    let mut bad: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    // resuming after one epoch must land exactly on the uninterrupted run
    let get = |name: &str| &a.iter().find(|x| x.0 == name).unwrap().1;
    if get("pretrain") != get("resumed") {
        bad.push("resume != uninterrupted");
    }
    let names: Vec<&str> = a.iter().map(|x| x.0).collect();
    outcome(
        bad.is_empty(),
        format!("stages compared byte for byte: {}; mismatches: {:?}", names.join(", "), bad),
    )
}

// --------------------------------------------------------------- criterion 12

fn forward_secs(model: &Model, trajs: &[Trajectory], l: usize, reps: usize) -> f64 {
    let cut: Vec<_> = trajs
        .iter()
        .map(|t| model.enrich(&t.with_points(t.points[..l].to_vec())).unwrap())
        .collect();
    let batch = model.batch(&cut.iter().collect::<Vec<_>>()).unwrap();
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let t0 = Instant::now();
        encode(&model.config, &model.params, &batch, false, &mut rng(0)).unwrap();
        best = best.min(t0.elapsed().as_secs_f64());
    }
    best
}

fn criterion_12() -> Outcome {
    let trajs = generate(&SynthConfig {
        n: 8,
        seed: 12,
        min_points: 200,
        max_points: 200,
        bbox: [-8.65, 41.12, -8.60, 41.16],
        ..SynthConfig::default()
    })
    .unwrap();
    let grid = Grid::covering(&trajs, 200.0).unwrap();
    let cells = grid.active_cells(&trajs).unwrap();
    let table = embed_cells(
        &CellGraph::over_cells(&grid, &cells),
        &SkipGramConfig { dim: 16, walks_per_node: 1, walk_len: 5, epochs: 1, ..SkipGramConfig::default() },
    )
    .unwrap()
    .table;
    let cfg = EncoderConfig { d_t: 16, heads: 2, heads_s: 2, layers: 2, dropout: 0.0, ..EncoderConfig::default() };
    let st = Standardization::fit(&trajs, cfg.length_scale).unwrap();
    let model = Model::new(cfg, grid, table, st).unwrap();
    let t100 = forward_secs(&model, &trajs, 100, 7);
    let t200 = forward_secs(&model, &trajs, 200, 7);
    let ratio = t200 / t100;
    outcome(
        ratio >= COMPLEXITY_RATIO,
        format!(
            "forward (B=8, d_t=16, h=2, L=2): l=100 {:.2} ms, l=200 {:.2} ms, ratio {ratio:.2} (min {COMPLEXITY_RATIO})",
            t100 * 1e3,
            t200 * 1e3
        ),
    )
}

// ---------------------------------------------------------------------- main

fn report(results: &mut Vec<(usize, bool)>, i: usize, o: Outcome) {
    println!("{} criterion {i}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push((i, o.pass));
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let mut results = Vec::new();
    let simple: [(usize, fn() -> Outcome); 6] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5), (6, criterion_6)];
    for (i, f) in simple {
        if wanted(i) {
            report(&mut results, i, f());
        }
    }
    let desk = (wanted(7) || wanted(8) || wanted(10)).then(desk_setup);
    if let Some(desk) = &desk {
        if wanted(7) || wanted(8) {
            let (c7, c8) = criteria_7_8(desk);
            if wanted(7) {
                report(&mut results, 7, c7);
            }
            if wanted(8) {
                report(&mut results, 8, c8);
            }
        }
    }
    if wanted(9) {
        report(&mut results, 9, criterion_9());
    }
    if let (Some(desk), true) = (&desk, wanted(10)) {
        report(&mut results, 10, criterion_10(desk));
    }
    if wanted(11) {
        report(&mut results, 11, criterion_11());
    }
    if wanted(12) {
        report(&mut results, 12, criterion_12());
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
