mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::Command;
use crate::error::{exit_code, CliError};
use crate::manifest::Manifest;

/// Trajectory similarity learning: data preparation, contrastive
/// pretraining, search, fine-tuning and evaluation.
///
/// Any config key can be overridden with `--section.key=value`.
#[derive(Debug, Parser)]
#[command(name = "trajsim", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Top,
}

#[derive(Debug, Subcommand)]
enum Top {
    #[command(flatten)]
    Run(Command),
    /// Re-run a recorded command and compare its outputs byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli, overrides: &[config::Override]) -> Result<()> {
    match cli.cmd {
        Top::Run(cmd) => {
            let mut cfg = config::load(cli.config.as_deref(), overrides)?;
            cmd.apply_flags(&mut cfg);
            cfg.validate()?;
            let rec = cmd.run(&cfg)?;
            let m = Manifest::build(&cmd, &cfg, &rec)?;
            let path = manifest::manifest_path(&cmd);
            m.save(&path)?;
            eprintln!("{}: manifest {}", cmd.name(), path.display());
            Ok(())
        }
        Top::Replay { manifest, out_dir } => {
            let m = Manifest::load(&manifest)?;
            let outcome = manifest::replay(&m, &out_dir)?;
            for p in &outcome.matched {
                println!("match     {}", p.display());
            }
            for p in &outcome.mismatched {
                println!("MISMATCH  {}", p.display());
            }
            if outcome.mismatched.is_empty() {
                Ok(())
            } else {
                Err(CliError::Data(format!("{} outputs differ from the recorded run", outcome.mismatched.len())).into())
            }
        }
    }
}

fn main() {
    let (args, overrides) = match config::split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(error::EXIT_CONFIG);
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    if let Err(e) = run(cli, &overrides) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
