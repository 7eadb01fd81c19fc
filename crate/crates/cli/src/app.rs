//! Argument handling and file output for the `dtnpole` binary.

use crate::config::{Layers, RunConfig};
use crate::output;
use crate::run::{self, StageError};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "dtnpole", version, about = "Scattering poles of perfectly conducting obstacles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mesh, assemble, search a region and write the resonances.
    Solve(Common),
    /// Exact unit-ball resonances in a region.
    Oracle(Common),
    /// Solve on a sequence of meshes and report convergence orders.
    Converge(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file; `converge` accepts one per level.
    #[arg(long = "config", value_name = "PATH")]
    pub config: Vec<PathBuf>,
    /// Result CSV; the JSON summary goes next to it.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "K")]
    pub threads: Option<usize>,
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    /// Defaults, then `file`, then `MP_*` variables, then flags.
    pub fn layers<F: Fn(&str) -> Option<String>>(&self, file: Option<&Path>, env: &F) -> Result<RunConfig> {
        let mut l = Layers::default();
        if let Some(f) = file {
            l.apply_file(f)?;
        }
        l.apply_env(env)?;
        l.apply_pairs(&self.set)?;
        if let Some(t) = self.threads {
            l.set("threads", &t.to_string())?;
        }
        if let Some(s) = self.seed {
            l.set("seed", &s.to_string())?;
        }
        if let Some(o) = &self.out {
            l.set("output.csv", &o.to_string_lossy())?;
        }
        RunConfig::from_layers(&l)
    }

    fn single<F: Fn(&str) -> Option<String>>(&self, env: &F) -> Result<RunConfig> {
        if self.config.len() > 1 {
            bail!("this command takes at most one --config");
        }
        self.layers(self.config.first().map(PathBuf::as_path), env)
    }
}

fn config_err(e: anyhow::Error) -> StageError {
    StageError {
        stage: "config",
        source: e,
    }
}

fn output_err(e: anyhow::Error) -> StageError {
    StageError {
        stage: "output",
        source: e,
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, StageError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| config_err(e.into()))
}

fn write_outputs(cfg: &RunConfig, csv: &str, summary: &serde_json::Value) -> Result<()> {
    let summary_path = cfg
        .summary
        .clone()
        .or_else(|| cfg.csv.as_ref().map(|p| p.with_extension("json")));
    match &cfg.csv {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    if let Some(p) = summary_path {
        let text = serde_json::to_string_pretty(summary)? + "\n";
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Run one parsed command line.
pub fn execute<F: Fn(&str) -> Option<String>>(cli: &Cli, env: F) -> Result<(), StageError> {
    match &cli.command {
        Command::Solve(c) => {
            let cfg = c.single(&env).map_err(config_err)?;
            let out = pool(cfg.threads)?.install(|| run::solve(&cfg))?;
            write_outputs(&cfg, &output::solve_csv(&cfg, &out), &output::solve_summary(&cfg, &out)).map_err(output_err)
        }
        Command::Oracle(c) => {
            let cfg = c.single(&env).map_err(config_err)?;
            let out = pool(cfg.threads)?.install(|| run::oracle(&cfg))?;
            write_outputs(&cfg, &output::oracle_csv(&cfg, &out), &output::oracle_summary(&cfg, &out))
                .map_err(output_err)
        }
        Command::Converge(c) => {
            let cfgs = converge_configs(c, &env).map_err(config_err)?;
            let out = pool(cfgs[0].threads)?.install(|| run::converge(&cfgs))?;
            write_outputs(
                &cfgs[0],
                &output::converge_csv(&cfgs, &out),
                &output::converge_summary(&cfgs, &out),
            )
            .map_err(output_err)
        }
    }
}

fn converge_configs<F: Fn(&str) -> Option<String>>(c: &Common, env: &F) -> Result<Vec<RunConfig>> {
    match c.config.len() {
        0 | 1 => {
            let base = c.single(env)?;
            if base.converge.shells.is_empty() {
                bail!("converge needs converge.shells or at least 3 --config files");
            }
            run::expand_levels(&base)
        }
        _ => c.config.iter().map(|p| c.layers(Some(p), env)).collect(),
    }
}
