use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::full_denoise;
use crate::container::{
    base_noise_to_container, cross_map_to_container, distribution_to_container, latent_to_container,
    self_map_to_container,
};
use crate::error::{InitnoError, Result};
use crate::pipeline::{initno, partition_experiment, PartitionOptions, PartitionReport, Scorer};
use crate::trace::{parse_jsonl, run_id, summarize, to_jsonl, trace_records};

use super::config::RunConfigFile;
use super::plots;

pub const REPORT_SCHEMA: &str = "initno.report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub run_id: String,
    pub backend: String,
    pub status: String,
    pub valid: bool,
    pub cross_score: f64,
    pub self_score: f64,
    pub selected_round: usize,
    pub rounds: usize,
    pub steps_per_round: Vec<usize>,
    pub total_steps: usize,
    pub updates: usize,
    pub evaluations: usize,
    pub noise_mean: f64,
    pub noise_variance: f64,
    pub wall_clock_secs: f64,
    pub files: BTreeMap<String, PathBuf>,
}

struct Outputs<'a> {
    dir: &'a Path,
    files: BTreeMap<String, PathBuf>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir,
            files: BTreeMap::new(),
        })
    }

    fn path(&mut self, key: &str, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.insert(key.to_owned(), p.clone());
        p
    }

    fn write(&mut self, key: &str, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(key, name);
        fs::write(p, bytes)?;
        Ok(())
    }
}

/// Default output directory: `$INITNO_OUT_DIR` (or `initno-out`) joined
/// with `<command>-<run id>`.
pub fn default_out_dir(command: &str, cfg: &RunConfigFile) -> PathBuf {
    if let Some(dir) = &cfg.out_dir {
        return dir.clone();
    }
    let root = std::env::var_os("INITNO_OUT_DIR").map_or_else(|| PathBuf::from("initno-out"), PathBuf::from);
    let id = run_id(&format!("{:?}", cfg.backend), &config_echo(cfg));
    root.join(format!("{command}-{id}"))
}

fn config_echo(cfg: &RunConfigFile) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

pub fn cmd_run(cfg: &RunConfigFile, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let backend = cfg.build_backend()?;
    let prompt = cfg.prompt_spec()?;
    let opt = &cfg.optimization;
    let result = initno(backend.as_ref(), &prompt, opt)?;
    let trace = &result.trace;
    let echo = config_echo(cfg);
    let id = run_id(backend.name(), &echo);

    let mut o = Outputs::new(out)?;
    o.write("config", "config.toml", cfg.to_toml())?;
    let meta = json!({
        "run_id": id,
        "status": trace.status.as_str(),
        "selected_round": trace.selected_round,
    });
    latent_to_container(&result.noise, meta)?.write_file(o.path("noise", "noise.inoa"))?;
    base_noise_to_container(&result.base)?.write_file(o.path("base_noise", "base_noise.inoa"))?;
    distribution_to_container(&result.distribution)?.write_file(o.path("distribution", "distribution.inoa"))?;
    let scorer = Scorer::new(backend.grid(), &prompt, opt.smoothing, opt.thresholds())?;
    let maps = scorer.evaluate_maps(backend.as_ref(), &prompt, &result.noise)?;
    cross_map_to_container(&maps.cross)?.write_file(o.path("cross_attention", "cross_attention.inoa"))?;
    self_map_to_container(&maps.self_attn)?.write_file(o.path("self_attention", "self_attention.inoa"))?;
    o.write(
        "trace",
        "trace.jsonl",
        to_jsonl(&trace_records(trace, backend.name(), &echo)),
    )?;
    plots::score_trajectories(&o.path("score_plot", "scores.svg"), trace, opt.tau_c, opt.tau_s)?;
    plots::noise_histogram(&o.path("noise_histogram", "noise_histogram.svg"), &result.noise.data)?;
    if cfg.sample {
        let sample = full_denoise(backend.as_ref(), &result.noise, &prompt)?;
        latent_to_container(&sample, json!({ "run_id": id, "sampled": true }))?
            .write_file(o.path("sample", "sample.inoa"))?;
    }

    let report_path = o.path("report", "report.json");
    let report = RunReport {
        schema: REPORT_SCHEMA.to_owned(),
        run_id: id,
        backend: backend.name().to_owned(),
        status: trace.status.as_str().to_owned(),
        valid: trace.final_scores.valid,
        cross_score: trace.final_scores.cross_score,
        self_score: trace.final_scores.self_score,
        selected_round: trace.selected_round,
        rounds: trace.rounds.len(),
        steps_per_round: trace.rounds.iter().map(|r| r.steps.len()).collect(),
        total_steps: trace.total_steps(),
        updates: trace.total_updates(),
        evaluations: trace.evaluations,
        noise_mean: result.noise.mean(),
        noise_variance: result.noise.variance(),
        wall_clock_secs: trace.wall_clock_secs,
        files: o.files.clone(),
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| InitnoError::Format(e.to_string()))?;
    fs::write(report_path, text)?;
    Ok(report)
}

pub fn cmd_partition(
    cfg: &RunConfigFile,
    n_seeds: usize,
    run_initno: bool,
    workers: Option<usize>,
    out: &Path,
) -> Result<(PartitionReport, String)> {
    let backend = cfg.build_backend()?;
    let prompt = cfg.prompt_spec()?;
    let report = partition_experiment(
        backend.as_ref(),
        &prompt,
        &cfg.optimization,
        PartitionOptions {
            n_seeds,
            run_initno,
            workers,
        },
    )?;
    let mut o = Outputs::new(out)?;
    o.write("config", "config.toml", cfg.to_toml())?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| InitnoError::Format(e.to_string()))?;
    o.write("report", "partition.json", text)?;
    o.write("table", "seeds.csv", seed_table(&report))?;
    plots::partition_scatter(&o.path("scatter", "scatter.svg"), &report)?;
    let summary = partition_summary(&report);
    o.write("summary", "summary.txt", &summary)?;
    Ok((report, summary))
}

fn seed_table(report: &PartitionReport) -> String {
    let mut s = String::from("index,seed,raw_cross,raw_self,raw_valid,opt_status,opt_cross,opt_self,opt_steps\n");
    for r in &report.records {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            r.index, r.seed, r.raw.cross_score, r.raw.self_score, r.raw.valid
        );
        match &r.optimized {
            Some(o) => {
                let _ = writeln!(
                    s,
                    ",{},{},{},{}",
                    o.status.as_str(),
                    o.scores.cross_score,
                    o.scores.self_score,
                    o.steps
                );
            }
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

pub fn partition_summary(report: &PartitionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seeds: {}", report.n_seeds);
    let _ = writeln!(
        s,
        "thresholds: tau_c {} tau_s {}",
        report.thresholds.tau_c, report.thresholds.tau_s
    );
    let _ = writeln!(s, "valid fraction (raw): {:.4}", report.raw_valid_fraction);
    if let Some(f) = report.optimized_valid_fraction {
        let _ = writeln!(s, "valid fraction (initno): {f:.4}");
        let _ = writeln!(s, "difference: {:+.4}", f - report.raw_valid_fraction);
    }
    s
}

pub fn cmd_inspect(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    Ok(summarize(&parse_jsonl(&text)?)?.render())
}
