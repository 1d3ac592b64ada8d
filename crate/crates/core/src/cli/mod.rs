//! Command-line front end: `run`, `partition` and `inspect`.

pub mod commands;
pub mod config;
pub mod plots;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;
pub use commands::{cmd_inspect, cmd_partition, cmd_run, RunReport};
pub use config::{BackendKind, RunConfigFile};

#[derive(Debug, Parser)]
#[command(
    name = "initno",
    version,
    about = "Initial noise optimization for attention-guided diffusion sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize one initial noise and export noise, trace, report and plots.
    Run(RunArgs),
    /// Score many raw noises (optionally optimizing each) and report the valid fraction.
    Partition(PartitionArgs),
    /// Summarize a trace file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Output directory (default: $INITNO_OUT_DIR or ./initno-out, plus a run id).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau_c: Option<f64>,
    #[arg(long)]
    pub tau_s: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_cross: Option<f64>,
    #[arg(long)]
    pub lambda_self: Option<f64>,
    #[arg(long)]
    pub lambda_kl: Option<f64>,
    /// Any config field, e.g. `--set toy.sot_bias=6` or `--set prompt.targets=[1,2]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 100)]
    pub n_seeds: usize,
    /// Worker threads for seed evaluation (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also optimize every seed and report the improved valid fraction.
    #[arg(long)]
    pub initno: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub trace: PathBuf,
}

impl CommonArgs {
    /// Config file, then `--set` overrides, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfigFile> {
        let base = match &self.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        let mut sets = self.set.clone();
        let mut flag = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{key}={v}"));
            }
        };
        flag("optimization.seed", self.seed.map(|v| v.to_string()));
        flag("backend", self.backend.map(|b| format!("{:?}", b).to_lowercase()));
        flag("optimization.tau_c", self.tau_c.map(float));
        flag("optimization.tau_s", self.tau_s.map(float));
        flag("optimization.max_steps", self.max_steps.map(|v| v.to_string()));
        flag("optimization.max_rounds", self.max_rounds.map(|v| v.to_string()));
        flag("optimization.lr", self.lr.map(float));
        flag("optimization.weights.cross", self.lambda_cross.map(float));
        flag("optimization.weights.self", self.lambda_self.map(float));
        flag("optimization.weights.kl", self.lambda_kl.map(float));
        base.with_overrides(&sets)
    }
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

/// Runs a parsed command and returns the text to print.
pub fn dispatch(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Run(a) => {
            let cfg = a.common.resolve()?;
            let out = a
                .common
                .out
                .clone()
                .unwrap_or_else(|| commands::default_out_dir("run", &cfg));
            let r = cmd_run(&cfg, &out)?;
            Ok(format!(
                "status: {}\ncross score: {:.6}\nself score: {:.6}\nrounds: {}\nsteps: {}\noutput: {}\n",
                r.status,
                r.cross_score,
                r.self_score,
                r.rounds,
                r.total_steps,
                out.display()
            ))
        }
        Command::Partition(a) => {
            let cfg = a.common.resolve()?;
            let out = a
                .common
                .out
                .clone()
                .unwrap_or_else(|| commands::default_out_dir("partition", &cfg));
            let (_, summary) = cmd_partition(&cfg, a.n_seeds, a.initno, a.workers, &out)?;
            Ok(format!("{summary}output: {}\n", out.display()))
        }
        Command::Inspect(a) => cmd_inspect(&a.trace),
    }
}
