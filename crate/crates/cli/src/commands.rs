//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Subcommand;
use serde::{Deserialize, Serialize};
use serde_json::json;
use trajsim::augment::Method;
use trajsim::binfmt::Checkpoint;
use trajsim::contrastive::{fit, resume_from, training_checkpoint, TrainState};
use trajsim::encoder::{Model, Standardization};
use trajsim::eval::{distort, downsample, make_query_db, mean_rank, EvalReport, QueryDb};
use trajsim::finetune::{embedding_metrics, finetune, finetuned_metrics};
use trajsim::geo::{dataset_stats, preprocess_filter, Trajectory};
use trajsim::grid::{derived_rng, embed_cells, CellEmbeddingTable, CellGraph, Grid, SkipGramConfig};
use trajsim::io::{canonical_line, load_dataset, write_dataset, Format};
use trajsim::measures::pairwise_matrix;
use trajsim::search::{build_ivf, default_k_c, knn_flat, knn_ivf, EmbeddingStore, IvfIndex};
use trajsim::synth::generate;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic random-walk dataset (format A).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --synth.n.
        #[arg(long)]
        n: Option<usize>,
        /// Shorthand for --synth.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Drop trajectories outside the length bounds and rewrite canonically.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid, cell graph and skip-gram cell embeddings into a directory.
    BuildGrid {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining into a directory of checkpoints.
    Pretrain {
        #[arg(long)]
        input: PathBuf,
        /// Output directory of build-grid (not needed with --resume).
        #[arg(long, required_unless_present = "resume")]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Held-out dataset for early stopping.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Training checkpoint to continue from. Its training config wins
        /// except for `train.max_epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed a dataset into an embedding file, optionally with an IVF index.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ivf: Option<PathBuf>,
    },
    /// Ranked neighbours of every query trajectory, as JSON lines.
    Knn {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --search.k.
        #[arg(long)]
        k: Option<usize>,
        /// Search this IVF index instead of a flat scan.
        #[arg(long)]
        ivf: Option<PathBuf>,
    },
    /// Pairwise heuristic distances as CSV.
    Measure {
        #[arg(long)]
        input: PathBuf,
        /// Column dataset; defaults to the input itself.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained model towards a heuristic measure.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean rank over database sizes, down-sampling and distortion; HR@k.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented views of a dataset, tagged with the method.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --augment.method.
        #[arg(long)]
        method: Option<Method>,
    },
}

/// What a run read and wrote, for the manifest.
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
}

impl Command {
    /// Copies shorthand flags into the config.
    pub fn apply_flags(&self, cfg: &mut RunConfig) {
        match self {
            Command::Synth { n, seed, .. } => {
                if let Some(n) = n {
                    cfg.synth.n = *n;
                }
                if let Some(s) = seed {
                    cfg.synth.seed = *s;
                }
            }
            Command::Knn { k: Some(k), .. } => cfg.search.k = *k,
            Command::Augment { method: Some(m), .. } => cfg.augment.method = *m,
            _ => {}
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::BuildGrid { .. } => "build-grid",
            Command::Pretrain { .. } => "pretrain",
            Command::Embed { .. } => "embed",
            Command::Knn { .. } => "knn",
            Command::Measure { .. } => "measure",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Augment { .. } => "augment",
        }
    }

    /// The output path; a directory for build-grid, pretrain and finetune.
    pub fn out(&self) -> &Path {
        match self {
            Command::Synth { out, .. }
            | Command::Preprocess { out, .. }
            | Command::BuildGrid { out, .. }
            | Command::Pretrain { out, .. }
            | Command::Embed { out, .. }
            | Command::Knn { out, .. }
            | Command::Measure { out, .. }
            | Command::Finetune { out, .. }
            | Command::Eval { out, .. }
            | Command::Augment { out, .. } => out,
        }
    }

    /// Points every output at `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) {
        let move_to = |p: &mut PathBuf| {
            let name = p.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "out".into());
            *p = dir.join(name);
        };
        match self {
            Command::Embed { out, ivf, .. } => {
                move_to(out);
                if let Some(i) = ivf {
                    move_to(i);
                }
            }
            Command::Synth { out, .. }
            | Command::Preprocess { out, .. }
            | Command::BuildGrid { out, .. }
            | Command::Pretrain { out, .. }
            | Command::Knn { out, .. }
            | Command::Measure { out, .. }
            | Command::Finetune { out, .. }
            | Command::Eval { out, .. }
            | Command::Augment { out, .. } => move_to(out),
        }
    }

    pub fn run(&self, cfg: &RunConfig) -> Result<RunRecord> {
        match self {
            Command::Synth { out, .. } => synth(cfg, out),
            Command::Preprocess { input, out } => preprocess(cfg, input, out),
            Command::BuildGrid { input, out } => build_grid(cfg, input, out),
            Command::Pretrain {
                input,
                grid,
                out,
                val,
                resume,
            } => pretrain(cfg, input, grid.as_deref(), out, val.as_deref(), resume.as_deref()),
            Command::Embed { model, input, out, ivf } => embed(cfg, model, input, out, ivf.as_deref()),
            Command::Knn {
                store,
                model,
                queries,
                out,
                ivf,
                ..
            } => knn(cfg, store, model, queries, out, ivf.as_deref()),
            Command::Measure { input, against, out } => measure(cfg, input, against.as_deref(), out),
            Command::Finetune { model, input, out } => finetune_cmd(cfg, model, input, out),
            Command::Eval { model, input, out } => eval(cfg, model, input, out),
            Command::Augment { input, out, .. } => augment(cfg, input, out),
        }
    }
}

pub fn require_file(p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(p.to_path_buf()))
    }
}

fn load_trajs(cfg: &RunConfig, path: &Path) -> Result<Vec<Trajectory>> {
    require_file(path)?;
    let format = cfg.preprocess.format.unwrap_or_else(|| Format::from_path(path));
    let report = load_dataset(path, format).with_context(|| format!("reading {}", path.display()))?;
    for e in &report.errors {
        eprintln!("warning: {}:{}: {}", path.display(), e.line, e.message);
    }
    if !report.errors.is_empty() {
        eprintln!(
            "warning: {}: {} malformed records skipped, {} loaded",
            path.display(),
            report.errors.len(),
            report.trajectories.len()
        );
    }
    if report.trajectories.is_empty() {
        return Err(CliError::Data(format!("{} holds no trajectories", path.display())).into());
    }
    Ok(report.trajectories)
}

fn load_model(path: &Path) -> Result<Model> {
    require_file(path)?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Model::from_checkpoint(&ck)?)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<RunRecord> {
    let trajs = generate(&cfg.synth)?;
    write_dataset(out, &trajs)?;
    println!("wrote {} synthetic trajectories to {}", trajs.len(), out.display());
    Ok(RunRecord {
        inputs: vec![],
        outputs: vec![out.to_path_buf()],
        seed: Some(cfg.synth.seed),
    })
}

fn preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<RunRecord> {
    let raw = load_trajs(cfg, input)?;
    let p = &cfg.preprocess;
    let kept = preprocess_filter(&raw, p.min_points, p.max_points);
    if kept.is_empty() {
        return Err(CliError::Data(format!(
            "no trajectory has between {} and {} points",
            p.min_points, p.max_points
        ))
        .into());
    }
    write_dataset(out, &kept)?;
    let s = dataset_stats(&kept)?;
    println!(
        "kept {} of {} trajectories; points {}..{} (mean {:.1}); length {:.2}..{:.2} km (mean {:.2})",
        kept.len(),
        raw.len(),
        s.min_points,
        s.max_points,
        s.mean_points,
        s.min_length_km,
        s.max_length_km,
        s.mean_length_km
    );
    Ok(RunRecord {
        inputs: vec![input.to_path_buf()],
        outputs: vec![out.to_path_buf()],
        seed: None,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct GridFile {
    grid: Grid,
    skipgram: SkipGramConfig,
    cells: usize,
    epoch_loss: Vec<f64>,
}

const GRID_JSON: &str = "grid.json";
const CELLS_EMB: &str = "cells.emb";

fn build_grid(cfg: &RunConfig, input: &Path, out: &Path) -> Result<RunRecord> {
    let trajs = load_trajs(cfg, input)?;
    let grid = Grid::covering(&trajs, cfg.grid.cell_side)?;
    let cells = grid.active_cells(&trajs)?;
    let graph = CellGraph::over_cells(&grid, &cells);
    println!(
        "grid {} x {} ({} cells), dictionary of {} cells, {} edges",
        grid.n_cols,
        grid.n_rows,
        grid.cell_count(),
        graph.node_count(),
        graph.edge_count()
    );
    let rep = embed_cells(&graph, &cfg.skipgram)?;
    create_dir(out)?;
    let (gpath, cpath) = (out.join(GRID_JSON), out.join(CELLS_EMB));
    rep.table.to_store()?.save(&cpath)?;
    write_json(
        &gpath,
        &GridFile {
            grid,
            skipgram: cfg.skipgram.clone(),
            cells: rep.table.len(),
            epoch_loss: rep.epoch_loss.clone(),
        },
    )?;
    println!("skip-gram loss per epoch: {:?}", rep.epoch_loss);
    Ok(RunRecord {
        inputs: vec![input.to_path_buf()],
        outputs: vec![gpath, cpath],
        seed: Some(cfg.skipgram.seed),
    })
}

fn load_grid_dir(dir: &Path) -> Result<(Grid, CellEmbeddingTable, Vec<PathBuf>)> {
    let (gpath, cpath) = (dir.join(GRID_JSON), dir.join(CELLS_EMB));
    require_file(&gpath)?;
    require_file(&cpath)?;
    let gf: GridFile = serde_json::from_str(&fs::read_to_string(&gpath)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", gpath.display())))?;
    let table = CellEmbeddingTable::from_store(&EmbeddingStore::load(&cpath)?)?;
    Ok((gf.grid, table, vec![gpath, cpath]))
}

fn pretrain(
    cfg: &RunConfig,
    input: &Path,
    grid_dir: Option<&Path>,
    out: &Path,
    val: Option<&Path>,
    resume: Option<&Path>,
) -> Result<RunRecord> {
    let trajs = load_trajs(cfg, input)?;
    let val_trajs = val.map(|p| load_trajs(cfg, p)).transpose()?.unwrap_or_default();
    let mut inputs = vec![input.to_path_buf()];
    inputs.extend(val.map(Path::to_path_buf));
    let (model, state, tcfg) = match resume {
        Some(ck_path) => {
            require_file(ck_path)?;
            inputs.push(ck_path.to_path_buf());
            let ck = Checkpoint::load(ck_path)?;
            let (model, state, mut tcfg) = resume_from(&ck)?;
            // the stored config wins except for the epoch budget
            tcfg.max_epochs = cfg.train.max_epochs;
            println!("resuming at epoch {} (step {})", state.epoch, state.step);
            (model, state, tcfg)
        }
        None => {
            let dir = grid_dir.ok_or_else(|| CliError::Config("pretrain needs --grid or --resume".into()))?;
            let (grid, table, files) = load_grid_dir(dir)?;
            inputs.extend(files);
            let st = Standardization::fit(&trajs, cfg.encoder.length_scale)?;
            let model = Model::new(cfg.encoder.clone(), grid, table, st)?;
            let state = TrainState::new(&model, &cfg.train)?;
            (model, state, cfg.train.clone())
        }
    };
    create_dir(out)?;
    let rep = fit(&model, state, &tcfg, &trajs, &val_trajs, Some(out), |r| {
        println!(
            "epoch {:>3}  lr {:.2e}  train {:.5}{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss.map(|v| format!("  val {v:.5}")).unwrap_or_default()
        );
    })?;
    let best = rep.best_checkpoint.clone().expect("fit was given an output directory");
    let fin = rep.final_checkpoint.clone().expect("fit was given an output directory");
    if !fin.exists() {
        // no epoch ran, e.g. a resume already at its budget
        training_checkpoint(&model, &rep.state, &tcfg)?.save(&fin)?;
    }
    // the deployable model carries the best epoch's online parameters
    let source = if best.exists() { &best } else { &fin };
    let (best_model, _, _) = resume_from(&Checkpoint::load(source)?)?;
    let model_path = out.join("model.ckpt");
    best_model.to_checkpoint("pretrained")?.save(&model_path)?;
    let history_path = out.join("history.json");
    write_json(&history_path, &rep.state.history)?;
    println!(
        "ran {} epochs{}; model written to {}",
        rep.epochs_run,
        if rep.stopped_early { " (early stop)" } else { "" },
        model_path.display()
    );
    let mut outputs = vec![fin, model_path, history_path];
    if best.exists() {
        outputs.insert(0, best);
    }
    Ok(RunRecord {
        inputs,
        outputs,
        seed: Some(tcfg.seed),
    })
}

fn embed_store(model: &Model, trajs: &[Trajectory], batch: usize) -> Result<EmbeddingStore> {
    let rows = model.embed(trajs, batch)?;
    let ids = trajs.iter().map(|t| t.id.clone()).collect();
    Ok(EmbeddingStore::from_rows(ids, &rows)?)
}

fn embed(cfg: &RunConfig, model_path: &Path, input: &Path, out: &Path, ivf: Option<&Path>) -> Result<RunRecord> {
    let model = load_model(model_path)?;
    let trajs = load_trajs(cfg, input)?;
    let store = embed_store(&model, &trajs, cfg.eval.batch_size)?;
    store.save(out)?;
    println!("embedded {} trajectories (d = {}) into {}", store.len(), store.dim(), out.display());
    let mut outputs = vec![out.to_path_buf()];
    if let Some(ipath) = ivf {
        let s = &cfg.search;
        let k_c = s.k_c.unwrap_or_else(|| default_k_c(store.len()));
        let mut index = build_ivf(&store, k_c, s.kmeans_iters, &mut derived_rng(s.seed, 0))?;
        if let Some(np) = s.nprobe {
            if np < 1 || np > k_c {
                return Err(CliError::Config(format!("search.nprobe must be in [1, {k_c}]")).into());
            }
            index.nprobe = np;
        }
        index.save(ipath)?;
        println!("ivf index: k_c = {k_c}, nprobe = {}", index.nprobe);
        outputs.push(ipath.to_path_buf());
    }
    Ok(RunRecord {
        inputs: vec![model_path.to_path_buf(), input.to_path_buf()],
        outputs,
        seed: ivf.map(|_| cfg.search.seed),
    })
}

#[derive(Serialize)]
struct KnnLine<'a> {
    query: &'a str,
    k: usize,
    k_clamped: bool,
    hits: Vec<HitOut<'a>>,
}

#[derive(Serialize)]
struct HitOut<'a> {
    id: &'a str,
    distance: f64,
}

fn knn(cfg: &RunConfig, store_path: &Path, model_path: &Path, queries: &Path, out: &Path, ivf: Option<&Path>) -> Result<RunRecord> {
    require_file(store_path)?;
    let store = EmbeddingStore::load(store_path)?;
    let model = load_model(model_path)?;
    let trajs = load_trajs(cfg, queries)?;
    let index = ivf
        .map(|p| {
            require_file(p)?;
            Ok::<_, anyhow::Error>(IvfIndex::load(p)?)
        })
        .transpose()?;
    let vecs = model.embed(&trajs, cfg.eval.batch_size)?;
    let k = cfg.search.k;
    let mut w = std::io::BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut clamped = 0;
    for (t, q) in trajs.iter().zip(&vecs) {
        let res = match &index {
            Some(ix) => knn_ivf(ix, &store, q, k, cfg.search.nprobe.unwrap_or(ix.nprobe))?,
            None => knn_flat(&store, q, k)?,
        };
        clamped += usize::from(res.clamped);
        let line = KnnLine {
            query: &t.id,
            k,
            k_clamped: res.clamped,
            hits: res.hits.iter().map(|h| HitOut { id: &h.id, distance: h.distance }).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("{} queries, k = {k}, {} k-clamped; results in {}", trajs.len(), clamped, out.display());
    let mut inputs = vec![store_path.to_path_buf(), model_path.to_path_buf(), queries.to_path_buf()];
    inputs.extend(ivf.map(Path::to_path_buf));
    Ok(RunRecord {
        inputs,
        outputs: vec![out.to_path_buf()],
        seed: None,
    })
}

fn measure(cfg: &RunConfig, input: &Path, against: Option<&Path>, out: &Path) -> Result<RunRecord> {
    let a = load_trajs(cfg, input)?;
    let b = match against {
        Some(p) => load_trajs(cfg, p)?,
        None => a.clone(),
    };
    let m = pairwise_matrix(&a, &b, cfg.measure)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    w.write_record(std::iter::once("id").chain(b.iter().map(|t| t.id.as_str())))?;
    for (t, row) in a.iter().zip(&m) {
        let cells: Vec<String> = row.iter().map(|d| d.to_string()).collect();
        w.write_record(std::iter::once(t.id.as_str()).chain(cells.iter().map(String::as_str)))?;
    }
    w.flush()?;
    println!("{} x {} distances ({:?}) written to {}", a.len(), b.len(), cfg.measure, out.display());
    let mut inputs = vec![input.to_path_buf()];
    inputs.extend(against.map(Path::to_path_buf));
    Ok(RunRecord {
        inputs,
        outputs: vec![out.to_path_buf()],
        seed: None,
    })
}

/// 7:1:2 split in file order.
fn split_712(trajs: &[Trajectory]) -> (&[Trajectory], &[Trajectory], &[Trajectory]) {
    let n = trajs.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    (&trajs[..n_train], &trajs[n_train..n_train + n_val], &trajs[n_train + n_val..])
}

#[derive(Serialize)]
struct Metrics {
    hr_at_k: BTreeMap<usize, f64>,
    r5_at_20: Option<f64>,
}

fn finetune_cmd(cfg: &RunConfig, model_path: &Path, input: &Path, out: &Path) -> Result<RunRecord> {
    let model = load_model(model_path)?;
    let trajs = load_trajs(cfg, input)?;
    let (train, val, test) = split_712(&trajs);
    if train.len() < 2 || test.len() < 2 {
        return Err(CliError::Data(format!("{} trajectories are too few for a 7:1:2 split", trajs.len())).into());
    }
    let fc = &cfg.finetune;
    let ks = &cfg.eval.hr_k;
    if ks.iter().any(|&k| k >= test.len()) {
        return Err(CliError::Config(format!("eval.hr_k values must be below the test split size {}", test.len())).into());
    }
    let d_train = pairwise_matrix(train, train, fc.target)?;
    let d_test = pairwise_matrix(test, test, fc.target)?;
    let (pre_hr, pre_r) = embedding_metrics(&model, test, &d_test, ks)?;
    let rep = finetune(&model, train, &d_train, fc, |e, mse| println!("epoch {e:>3}  mse {mse:.6}"))?;
    let (post_hr, post_r) = finetuned_metrics(&rep.finetuned, test, &d_test, ks)?;
    create_dir(out)?;
    let ck_path = out.join("finetuned.ckpt");
    rep.finetuned.to_checkpoint()?.save(&ck_path)?;
    let report_path = out.join("report.json");
    let report = json!({
        "target": fc.target,
        "scope": fc.scope,
        "label": "exp(-d / alpha)",
        "alpha": rep.finetuned.alpha,
        "split": {"train": train.len(), "val": val.len(), "test": test.len()},
        "pairs": rep.pairs,
        "epoch_mse": rep.epoch_mse,
        "final_mse": rep.final_mse,
        "test_before": Metrics { hr_at_k: pre_hr.clone(), r5_at_20: pre_r },
        "test_after": Metrics { hr_at_k: post_hr.clone(), r5_at_20: post_r },
        "seed": fc.seed,
    });
    write_json(&report_path, &report)?;
    println!("{:<12}{}", "", ks.iter().map(|k| format!("{:>9}", format!("HR@{k}"))).collect::<String>() + "    R5@20");
    for (name, hr, r) in [("pretrained", &pre_hr, pre_r), ("fine-tuned", &post_hr, post_r)] {
        let cols: String = ks.iter().map(|k| format!("{:>9.4}", hr[k])).collect();
        println!("{name:<12}{cols}{}", r.map(|v| format!("{v:>9.4}")).unwrap_or_else(|| "        -".into()));
    }
    Ok(RunRecord {
        inputs: vec![model_path.to_path_buf(), input.to_path_buf()],
        outputs: vec![ck_path, report_path],
        seed: Some(fc.seed),
    })
}

#[derive(Serialize)]
struct SweepRow {
    value: f64,
    db_size: usize,
    mean_rank: f64,
}

#[derive(Serialize)]
struct FullEvalReport {
    summary: EvalReport,
    database_size: Vec<SweepRow>,
    downsampling: Vec<SweepRow>,
    distortion: Vec<SweepRow>,
}

#[derive(Clone, Copy)]
enum Perturb {
    Downsample,
    Distort,
}

/// Applies the same perturbation to queries and database.
fn perturb(qdb: &QueryDb, kind: Perturb, rate: f64, seed: u64, stream: u64) -> Result<QueryDb> {
    let mut rng = derived_rng(seed, stream);
    let mut apply = |t: &Trajectory| match kind {
        Perturb::Downsample => downsample(t, rate, &mut rng),
        Perturb::Distort => distort(t, rate, &mut rng),
    };
    let queries = qdb.queries.iter().map(&mut apply).collect::<trajsim::Result<_>>()?;
    let database = qdb.database.iter().map(&mut apply).collect::<trajsim::Result<_>>()?;
    Ok(QueryDb {
        queries,
        database,
        truth: qdb.truth.clone(),
    })
}

fn eval(cfg: &RunConfig, model_path: &Path, input: &Path, out: &Path) -> Result<RunRecord> {
    let model = load_model(model_path)?;
    let trajs = load_trajs(cfg, input)?;
    let e = &cfg.eval;
    let mut database_size = Vec::new();
    let mut base = None;
    for (i, &db) in e.db_sizes.iter().enumerate() {
        let qdb = make_query_db(&trajs, e.n_queries, db, &mut derived_rng(e.seed, i as u64))?;
        let mr = mean_rank(&model, &qdb, e.batch_size)?;
        database_size.push(SweepRow {
            value: db as f64,
            db_size: db,
            mean_rank: mr,
        });
        base.get_or_insert(qdb);
    }
    let base = base.expect("db_sizes is non-empty");
    let db0 = e.db_sizes[0];
    let sweep = |rates: &[f64], kind: Perturb, stream: u64| -> Result<Vec<SweepRow>> {
        rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let q = perturb(&base, kind, r, e.seed, stream + i as u64)?;
                Ok(SweepRow {
                    value: r,
                    db_size: db0,
                    mean_rank: mean_rank(&model, &q, e.batch_size)?,
                })
            })
            .collect()
    };
    let downsampling = sweep(&e.rho_s, Perturb::Downsample, 1000)?;
    let distortion = sweep(&e.rho_d, Perturb::Distort, 2000)?;
    let (hr_at_k, r5_at_20) = if e.hr_pool > 0 {
        let pool = &trajs[..e.hr_pool.min(trajs.len())];
        if e.hr_k.iter().any(|&k| k >= pool.len()) {
            return Err(CliError::Config(format!("eval.hr_k values must be below the pool size {}", pool.len())).into());
        }
        let truth = pairwise_matrix(pool, pool, cfg.measure)?;
        embedding_metrics(&model, pool, &truth, &e.hr_k)?
    } else {
        (BTreeMap::new(), None)
    };
    let report = FullEvalReport {
        summary: EvalReport {
            mean_rank: Some(database_size[0].mean_rank),
            hr_at_k,
            r5_at_20,
            seed: e.seed,
            config: json!({ "eval": e, "measure": cfg.measure }),
        },
        database_size,
        downsampling,
        distortion,
    };
    write_json(out, &report)?;
    println!("{:<14}{:>8}{:>10}{:>12}", "sweep", "value", "|D|", "mean rank");
    for (name, rows) in [
        ("database", &report.database_size),
        ("downsample", &report.downsampling),
        ("distort", &report.distortion),
    ] {
        for r in rows {
            println!("{name:<14}{:>8}{:>10}{:>12.3}", r.value, r.db_size, r.mean_rank);
        }
    }
    for (k, v) in &report.summary.hr_at_k {
        println!("HR@{k} = {v:.4}");
    }
    if let Some(r) = report.summary.r5_at_20 {
        println!("R5@20 = {r:.4}");
    }
    Ok(RunRecord {
        inputs: vec![model_path.to_path_buf(), input.to_path_buf()],
        outputs: vec![out.to_path_buf()],
        seed: Some(e.seed),
    })
}

fn augment(cfg: &RunConfig, input: &Path, out: &Path) -> Result<RunRecord> {
    let trajs = load_trajs(cfg, input)?;
    let a = &cfg.augment;
    let tag = serde_json::to_string(&a.method.to_string())?;
    let mut w = std::io::BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut written = 0;
    for (i, t) in trajs.iter().enumerate() {
        match a.apply(t, &mut derived_rng(a.seed, i as u64)) {
            Ok(v) => {
                writeln!(w, "{}", canonical_line(&v, &[("method", tag.clone())]))?;
                written += 1;
            }
            Err(e) => eprintln!("warning: skipping {}: {e}", t.id),
        }
    }
    w.flush()?;
    println!("wrote {written} of {} trajectories ({}) to {}", trajs.len(), a.method, out.display());
    Ok(RunRecord {
        inputs: vec![input.to_path_buf()],
        outputs: vec![out.to_path_buf()],
        seed: Some(a.seed),
    })
}
