//! Run configuration: one TOML section per module, overridable from the
//! command line with `--section.key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use trajsim::augment::AugmentConfig;
use trajsim::contrastive::TrainConfig;
use trajsim::encoder::EncoderConfig;
use trajsim::finetune::FinetuneConfig;
use trajsim::grid::SkipGramConfig;
use trajsim::io::Format;
use trajsim::measures::MeasureKind;
use trajsim::synth::SynthConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_points: usize,
    pub max_points: usize,
    /// Input format; `None` guesses from the file extension.
    pub format: Option<Format>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_points: 20,
            max_points: 200,
            format: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Cell side length in meters.
    pub cell_side: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { cell_side: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub k: usize,
    /// Coarse cells; `None` means `ceil(sqrt(count))`.
    pub k_c: Option<usize>,
    /// Probed cells; `None` means `ceil(k_c / 16)`.
    pub nprobe: Option<usize>,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 10,
            k_c: None,
            nprobe: None,
            kmeans_iters: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_queries: usize,
    /// Database sizes swept by the clean mean-rank protocol.
    pub db_sizes: Vec<usize>,
    /// Down-sampling rates swept at the first database size.
    pub rho_s: Vec<f64>,
    /// Distortion rates swept at the first database size.
    pub rho_d: Vec<f64>,
    /// Cut-offs for HR@k against the heuristic measure.
    pub hr_k: Vec<usize>,
    /// Trajectories used for the HR@k / R5@20 block; 0 skips it.
    pub hr_pool: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_queries: 100,
            db_sizes: vec![500],
            rho_s: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            rho_d: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            hr_k: vec![5, 20],
            hr_pool: 0,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub grid: GridConfig,
    pub skipgram: SkipGramConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub measure: MeasureKind,
    pub search: SearchConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub augment: AugmentConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let lib = |r: trajsim::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        lib(self.synth.validate())?;
        lib(self.encoder.validate())?;
        lib(self.train.validate())?;
        lib(self.measure.validate())?;
        lib(self.finetune.validate())?;
        lib(self.augment.validate())?;
        let p = &self.preprocess;
        if p.min_points < 2 || p.min_points > p.max_points {
            return Err(CliError::Config("preprocess needs 2 <= min_points <= max_points".into()));
        }
        if !(self.grid.cell_side > 0.0) {
            return Err(CliError::Config("grid.cell_side must be positive".into()));
        }
        if self.search.k == 0 || self.search.kmeans_iters == 0 {
            return Err(CliError::Config("search.k and search.kmeans_iters must be positive".into()));
        }
        let e = &self.eval;
        if e.n_queries == 0 || e.db_sizes.is_empty() || e.batch_size == 0 {
            return Err(CliError::Config("eval needs n_queries, batch_size and at least one db size".into()));
        }
        if e.rho_s.iter().chain(&e.rho_d).any(|r| !(0.0..1.0).contains(r)) {
            return Err(CliError::Config("eval rho_s and rho_d values must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A `--section.key=value` flag split into its dotted path and raw value.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: String,
}

impl Override {
    pub fn parse(flag: &str) -> Result<Override, CliError> {
        let body = flag.strip_prefix("--").unwrap_or(flag);
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override '{flag}' needs the form --section.key=value")))?;
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("override '{flag}' needs a section and a key")));
        }
        Ok(Override {
            path,
            value: value.to_string(),
        })
    }
}

/// Splits argv into plain arguments and dotted overrides. A dotted flag is a
/// long flag whose name (before any `=`) contains a dot.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>), CliError> {
    let mut plain = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        let name = a.strip_prefix("--").map(|r| r.split('=').next().unwrap_or(r));
        if name.is_some_and(|n| n.contains('.')) {
            overrides.push(Override::parse(&a)?);
        } else {
            plain.push(a);
        }
    }
    Ok((plain, overrides))
}

// TOML literal if it parses as one, else a bare string
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, o: &Override) -> Result<(), CliError> {
    let (last, parents) = o.path.split_last().expect("override path has at least two parts");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{p}' in '{}' is not a section", o.path.join("."))))?;
    }
    cur.insert(last.clone(), parse_value(&o.value));
    Ok(())
}

pub fn from_table(table: toml::Table) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// File values first, then overrides in command-line order.
pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::from_io(p, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table)
}
