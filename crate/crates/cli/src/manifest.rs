//! Run manifests: what was run, with which config, on which bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::{require_file, Command, RunRecord};
use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: Command,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::from_io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// `<dir>/manifest.json` for directory outputs, else `<out>.manifest.json`.
pub fn manifest_path(cmd: &Command) -> PathBuf {
    let out = cmd.out();
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

impl Manifest {
    pub fn build(cmd: &Command, cfg: &RunConfig, rec: &RunRecord) -> Result<Manifest> {
        Ok(Manifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: cmd.clone(),
            seed: rec.seed,
            config: cfg.clone(),
            inputs: digests(&rec.inputs)?,
            outputs: digests(&rec.outputs)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        require_file(path)?;
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(trajsim::Error::Version {
                found: m.manifest_version,
                expected: MANIFEST_VERSION,
            }
            .into());
        }
        Ok(m)
    }
}

/// Outcome of re-running a manifest.
#[derive(Debug)]
pub struct ReplayOutcome {
    pub matched: Vec<PathBuf>,
    pub mismatched: Vec<PathBuf>,
}

/// Checks the recorded inputs, reruns the command with outputs under
/// `out_dir` and compares output digests by file name.
pub fn replay(m: &Manifest, out_dir: &Path) -> Result<ReplayOutcome> {
    for input in &m.inputs {
        let found = sha256_file(&input.path)?;
        if found != input.sha256 {
            return Err(CliError::Data(format!("input {} changed since the recorded run", input.path.display())).into());
        }
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut cmd = m.command.clone();
    cmd.redirect_outputs(out_dir);
    let rec = cmd.run(&m.config)?;
    let mut outcome = ReplayOutcome {
        matched: Vec::new(),
        mismatched: Vec::new(),
    };
    for old in &m.outputs {
        let name = old.path.file_name();
        let new = rec.outputs.iter().find(|p| p.file_name() == name);
        match new {
            Some(p) if sha256_file(p)? == old.sha256 => outcome.matched.push(p.clone()),
            Some(p) => outcome.mismatched.push(p.clone()),
            None => outcome.mismatched.push(old.path.clone()),
        }
    }
    Ok(outcome)
}
