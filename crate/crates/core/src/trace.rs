//! Line-delimited trace records.
//!
//! A trace file holds one JSON object per line, each tagged by `record`:
//! a `header`, then per-step `step` records grouped by round, a `round_end`
//! after each round, and one final `terminal` record. Timing is left out so
//! that repeated runs produce identical files.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{InitnoError, Result};
use crate::pipeline::{lossy_f64, OptimizationTrace, RoundStatus, StepRecord, TerminalStatus};

pub const TRACE_SCHEMA: &str = "initno.trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header {
        schema: String,
        run_id: String,
        backend: String,
        config: Value,
    },
    Step(StepRecord),
    RoundEnd {
        round: usize,
        seed: String,
        status: RoundStatus,
        steps: usize,
        updates: usize,
        diagnostic: Option<String>,
    },
    Terminal {
        status: TerminalStatus,
        selected_round: usize,
        #[serde(with = "lossy_f64")]
        cross_score: f64,
        #[serde(with = "lossy_f64")]
        self_score: f64,
        valid: bool,
        rounds: usize,
        evaluations: usize,
    },
}

/// Stable id derived from the backend name and the config echo.
pub fn run_id(backend: &str, config: &Value) -> String {
    let mut h = Sha256::new();
    h.update(backend.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(config).expect("JSON value serializes"));
    let digest = h.finalize();
    let mut s = String::with_capacity(16);
    for b in &digest[..8] {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

pub fn trace_records(trace: &OptimizationTrace, backend: &str, config: &Value) -> Vec<TraceRecord> {
    let mut out = vec![TraceRecord::Header {
        schema: TRACE_SCHEMA.to_owned(),
        run_id: run_id(backend, config),
        backend: backend.to_owned(),
        config: config.clone(),
    }];
    for round in &trace.rounds {
        out.extend(round.steps.iter().copied().map(TraceRecord::Step));
        out.push(TraceRecord::RoundEnd {
            round: round.round,
            seed: round.seed.to_string(),
            status: round.status,
            steps: round.steps.len(),
            updates: round.updates,
            diagnostic: round.diagnostic.clone(),
        });
    }
    out.push(TraceRecord::Terminal {
        status: trace.status,
        selected_round: trace.selected_round,
        cross_score: trace.final_scores.cross_score,
        self_score: trace.final_scores.self_score,
        valid: trace.final_scores.valid,
        rounds: trace.rounds.len(),
        evaluations: trace.evaluations,
    });
    out
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("trace record serializes"));
        s.push('\n');
    }
    s
}

/// Parses a trace; errors name the 1-based index of the first bad record.
pub fn parse_jsonl(text: &str) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(line).map_err(|e| InitnoError::Format(format!("record {}: {e}", i + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(InitnoError::Format("no records".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub run_id: String,
    pub backend: String,
    pub status: TerminalStatus,
    pub selected_round: usize,
    pub final_scores: (f64, f64),
    /// Lowest `S_cross + S_self` seen at any step, with its scores.
    pub best: Option<StepRecord>,
    pub steps_per_round: Vec<usize>,
    pub evaluations: usize,
}

pub fn summarize(records: &[TraceRecord]) -> Result<TraceSummary> {
    let bad = |i: usize, msg: &str| InitnoError::Format(format!("record {}: {msg}", i + 1));
    let (run_id, backend) = match records.first() {
        Some(TraceRecord::Header {
            schema,
            run_id,
            backend,
            ..
        }) => {
            if schema != TRACE_SCHEMA {
                return Err(bad(0, &format!("unsupported schema {schema:?}")));
            }
            (run_id.clone(), backend.clone())
        }
        Some(_) => return Err(bad(0, "expected a header record")),
        None => return Err(InitnoError::Format("no records".into())),
    };
    let mut best: Option<StepRecord> = None;
    let mut steps_per_round = Vec::new();
    let mut current = 0usize;
    let mut last_step: Option<(usize, usize)> = None;
    let mut terminal = None;
    for (i, rec) in records.iter().enumerate().skip(1) {
        if terminal.is_some() {
            return Err(bad(i, "record after terminal record"));
        }
        match rec {
            TraceRecord::Header { .. } => return Err(bad(i, "duplicate header")),
            TraceRecord::Step(s) => {
                if let Some((r, k)) = last_step {
                    if r == s.round && s.step <= k {
                        return Err(bad(i, "step indices must increase within a round"));
                    }
                }
                last_step = Some((s.round, s.step));
                current += 1;
                if best.as_ref().is_none_or(|b| s.total() < b.total()) {
                    best = Some(*s);
                }
            }
            TraceRecord::RoundEnd { steps, .. } => {
                if *steps != current {
                    return Err(bad(i, "round step count does not match its step records"));
                }
                steps_per_round.push(current);
                current = 0;
                last_step = None;
            }
            TraceRecord::Terminal {
                status,
                selected_round,
                cross_score,
                self_score,
                evaluations,
                ..
            } => terminal = Some((*status, *selected_round, (*cross_score, *self_score), *evaluations)),
        }
    }
    let (status, selected_round, final_scores, evaluations) =
        terminal.ok_or_else(|| InitnoError::Format("trace has no terminal record".into()))?;
    Ok(TraceSummary {
        run_id,
        backend,
        status,
        selected_round,
        final_scores,
        best,
        steps_per_round,
        evaluations,
    })
}

impl TraceSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "status: {}", self.status.as_str());
        let _ = writeln!(s, "run id: {}", self.run_id);
        let _ = writeln!(s, "backend: {}", self.backend);
        let _ = writeln!(s, "selected round: {}", self.selected_round);
        let _ = writeln!(
            s,
            "final scores: cross {:.6} self {:.6}",
            self.final_scores.0, self.final_scores.1
        );
        if let Some(b) = &self.best {
            let _ = writeln!(
                s,
                "best step: round {} step {} cross {:.6} self {:.6}",
                b.round, b.step, b.cross_score, b.self_score
            );
        }
        let per: Vec<String> = self.steps_per_round.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "steps per round: {}", per.join(" "));
        let _ = writeln!(s, "evaluations: {}", self.evaluations);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::evaluate_validity;

    fn step(round: usize, step: usize, c: f64) -> StepRecord {
        StepRecord {
            round,
            step,
            cross_score: c,
            self_score: 0.1,
            valid: false,
            l_kl: 0.0,
            l_joint: c,
            mu_mean: 0.0,
            mu_std: 0.0,
            sigma_mean: 1.0,
            sigma_std: 0.0,
        }
    }

    fn sample() -> OptimizationTrace {
        use crate::pipeline::RoundTrace;
        OptimizationTrace {
            rounds: vec![RoundTrace {
                round: 0,
                seed: u64::MAX,
                status: RoundStatus::Valid,
                diagnostic: None,
                steps: vec![step(0, 1, 0.5), step(0, 2, f64::NAN), step(0, 3, 0.1)],
                updates: 2,
            }],
            status: TerminalStatus::Valid,
            selected_round: 0,
            final_scores: evaluate_validity(0.1, 0.1, 0.2, 0.3),
            evaluations: 3,
            wall_clock_secs: 1.0,
        }
    }

    #[test]
    fn roundtrip_and_summary() {
        let cfg = serde_json::json!({"seed": 1});
        let recs = trace_records(&sample(), "toy", &cfg);
        let text = to_jsonl(&recs);
        let back = parse_jsonl(&text).unwrap();
        assert_eq!(back.len(), 6);
        let s = summarize(&back).unwrap();
        assert_eq!(s.status, TerminalStatus::Valid);
        assert_eq!(s.steps_per_round, vec![3]);
        assert_eq!(s.best.unwrap().step, 3);
        assert!(s.render().starts_with("status: valid\n"));
        assert_eq!(to_jsonl(&back), text);
    }

    #[test]
    fn corrupt_traces() {
        assert_eq!(parse_jsonl("").unwrap_err().to_string(), "format error: no records");
        let text = to_jsonl(&trace_records(&sample(), "toy", &serde_json::json!({})));
        let lines: Vec<&str> = text.lines().collect();
        let broken = format!("{}\n{}\n{}\n", lines[0], lines[1], &lines[2][..10]);
        assert!(parse_jsonl(&broken).unwrap_err().to_string().contains("record 3"));
        let no_terminal = lines[..4].join("\n");
        assert!(summarize(&parse_jsonl(&no_terminal).unwrap()).is_err());
    }

    #[test]
    fn run_id_depends_on_config() {
        let a = run_id("toy", &serde_json::json!({"seed": 1}));
        assert_eq!(a.len(), 16);
        assert_eq!(a, run_id("toy", &serde_json::json!({"seed": 1})));
        assert_ne!(a, run_id("toy", &serde_json::json!({"seed": 2})));
    }
}
