//! The optimization loop: score a noise, step `(mu, sigma)` with Adam until
//! the noise is valid, resample across rounds and fall back to the best
//! pooled noise.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    AggregatedCrossAttentionMap, AggregatedSelfAttentionMap, Grid, SmoothingSettings, TokenIndexSet,
};
use crate::autodiff::{SparseOperator, Tape, Var};
use crate::backend::{DenoiserBackend, PromptSpec};
use crate::error::{arg_err, InitnoError, Result};
use crate::noise::{
    adam_update, joint_loss, kl_gradient, kl_to_standard, reparameterize, sample_standard, AdamState, BaseNoise,
    Latent, LossBreakdown, LossWeights, NoiseDistribution,
};
use crate::scoring::{evaluate_validity, ScorePair, Thresholds};
use crate::seed::{partition_seed, round_seed};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationConfig {
    pub tau_c: f64,
    pub tau_s: f64,
    pub max_steps: usize,
    pub max_rounds: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub seed: u64,
    pub smoothing: SmoothingSettings,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        let t = Thresholds::default();
        Self {
            tau_c: t.tau_c,
            tau_s: t.tau_s,
            max_steps: 50,
            max_rounds: 5,
            weights: LossWeights::default(),
            lr: 1e-2,
            seed: 0,
            smoothing: SmoothingSettings::default(),
        }
    }
}

impl OptimizationConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            tau_c: self.tau_c,
            tau_s: self.tau_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds().validate()?;
        self.validate_settings()
    }

    fn validate_settings(&self) -> Result<()> {
        if self.max_steps == 0 || self.max_rounds == 0 {
            return Err(arg_err("max_steps and max_rounds must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(arg_err("lr must be positive"));
        }
        self.weights.validate()?;
        self.smoothing.validate()
    }
}

/// Reusable scoring state for one backend grid and prompt.
pub struct Scorer {
    smoothing: Arc<SparseOperator>,
    settings: SmoothingSettings,
    tokens: TokenIndexSet,
    grid: Grid,
    thresholds: Thresholds,
}

/// Scores recorded on a tape: the two score nodes and their values.
pub struct TapedScores {
    pub cross: Var,
    pub self_attn: Var,
    pub scores: ScorePair,
}

/// Smoothed, re-weighted maps from one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedMaps {
    pub cross: AggregatedCrossAttentionMap,
    pub self_attn: AggregatedSelfAttentionMap,
    pub scores: ScorePair,
}

impl Scorer {
    pub fn new(grid: Grid, prompt: &PromptSpec, settings: SmoothingSettings, thresholds: Thresholds) -> Result<Self> {
        settings.validate()?;
        thresholds.validate_closed()?;
        prompt.validate()?;
        let op = crate::attention::smoothing_operator(grid, settings.kernel_size, settings.sigma)?;
        Ok(Self {
            smoothing: Arc::new(SparseOperator::new(op)),
            settings,
            tokens: prompt.target_tokens.clone(),
            grid,
            thresholds,
        })
    }

    /// Runs one step at `t = T` on `tape` and records aggregation,
    /// re-weighting, smoothing and both scores.
    pub fn score_on_tape(
        &self,
        tape: &mut Tape,
        backend: &dyn DenoiserBackend,
        latent: Var,
        prompt: &PromptSpec,
    ) -> Result<(TapedScores, Var, Var, Vec<usize>)> {
        if self.tokens.is_empty() {
            return Err(InitnoError::NoTargetTokens);
        }
        let t = prompt.num_denoise_steps;
        let step = backend.trace_step(tape, latent, &prompt.token_embeddings, t, t)?;
        let cross_raw: Vec<Var> = step.cross.iter().map(|e| e.2).collect();
        let self_raw: Vec<Var> = step.self_attn.iter().map(|e| e.2).collect();
        if cross_raw.is_empty() || self_raw.is_empty() {
            return Err(InitnoError::EmptyStack);
        }
        let cross = tape.mean(&cross_raw)?;
        let n_tokens = tape.value(cross).cols();
        self.tokens.validate(n_tokens)?;
        let sot = self.tokens.sot_index();
        let keep: Vec<usize> = (0..n_tokens).filter(|&c| c != sot).collect();
        let kept = tape.select_cols(cross, keep.clone())?;
        let logits = tape.scale(kept, self.settings.temperature);
        let weighted = tape.softmax_rows(logits);
        let cross = tape.sparse_left_mul(self.smoothing.clone(), weighted)?;

        let self_agg = tape.mean(&self_raw)?;
        let self_map = tape.sparse_left_mul(self.smoothing.clone(), self_agg)?;

        let mut peaks = Vec::new();
        let mut cells = Vec::new();
        for &tok in self.tokens.indices() {
            let col = keep
                .iter()
                .position(|&k| k == tok)
                .expect("target is not the start token");
            let (peak, cell) = tape.column_max(cross, col)?;
            peaks.push(peak);
            cells.push(cell);
        }
        let weakest = tape.min_of(&peaks)?;
        let s_cross = tape.affine(weakest, -1.0, 1.0);

        let rows = cells
            .iter()
            .map(|&c| tape.select_row(self_map, c))
            .collect::<Result<Vec<_>>>()?;
        let mut conflicts = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let overlap = tape.elem_min(rows[i], rows[j])?;
                let overlap = tape.sum(overlap);
                let both = tape.add(rows[i], rows[j])?;
                let mass = tape.sum(both);
                if tape.value(mass).item() == 0.0 {
                    return Err(InitnoError::DegenerateSelfAttention);
                }
                conflicts.push(tape.div(overlap, mass)?);
            }
        }
        let s_self = if conflicts.is_empty() {
            tape.constant(Matrix::scalar(0.0))
        } else {
            tape.mean(&conflicts)?
        };
        let scores = evaluate_validity(
            tape.value(s_cross).item(),
            tape.value(s_self).item(),
            self.thresholds.tau_c,
            self.thresholds.tau_s,
        );
        Ok((
            TapedScores {
                cross: s_cross,
                self_attn: s_self,
                scores,
            },
            cross,
            self_map,
            keep,
        ))
    }

    /// Scores a fixed noise (no gradients).
    pub fn evaluate(&self, backend: &dyn DenoiserBackend, prompt: &PromptSpec, noise: &Latent) -> Result<ScorePair> {
        Ok(self.evaluate_maps(backend, prompt, noise)?.scores)
    }

    pub fn evaluate_maps(
        &self,
        backend: &dyn DenoiserBackend,
        prompt: &PromptSpec,
        noise: &Latent,
    ) -> Result<EvaluatedMaps> {
        check_noise(backend, noise)?;
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::from_vec(1, noise.data.len(), noise.data.clone())?);
        let (taped, cross, self_map, keep) = self.score_on_tape(&mut tape, backend, z, prompt)?;
        Ok(EvaluatedMaps {
            cross: AggregatedCrossAttentionMap::new(self.grid, tape.value(cross).clone(), keep)?,
            self_attn: AggregatedSelfAttentionMap::new(self.grid, tape.value(self_map).clone())?,
            scores: taped.scores,
        })
    }

    /// Scores and the gradient of `w_c * S_cross + w_s * S_self` with
    /// respect to the noise.
    pub fn evaluate_with_gradient(
        &self,
        backend: &dyn DenoiserBackend,
        prompt: &PromptSpec,
        noise: &Latent,
        weights: LossWeights,
    ) -> Result<(ScorePair, Vec<f64>)> {
        check_noise(backend, noise)?;
        if !backend.differentiable() {
            return Err(InitnoError::NotDifferentiable);
        }
        let mut tape = Tape::new();
        let z = tape.variable(Matrix::from_vec(1, noise.data.len(), noise.data.clone())?);
        let (taped, ..) = self.score_on_tape(&mut tape, backend, z, prompt)?;
        let lc = tape.scale(taped.cross, weights.cross);
        let ls = tape.scale(taped.self_attn, weights.self_attn);
        let total = tape.add(lc, ls)?;
        let mut grads = tape.backward(total);
        let g = grads
            .take(z)
            .map(Matrix::into_vec)
            .unwrap_or_else(|| vec![0.0; noise.data.len()]);
        Ok((taped.scores, g))
    }
}

/// Joint loss at `mu + sigma * eps` and its gradient in `(mu, sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub scores: ScorePair,
    pub loss: LossBreakdown,
    pub grad_mu: Vec<f64>,
    pub grad_sigma: Vec<f64>,
}

impl Scorer {
    pub fn joint_loss_gradient(
        &self,
        backend: &dyn DenoiserBackend,
        prompt: &PromptSpec,
        dist: &NoiseDistribution,
        base: &BaseNoise,
        weights: LossWeights,
    ) -> Result<LossGradient> {
        let z = reparameterize(dist, base)?;
        let (scores, g_z) = self.evaluate_with_gradient(backend, prompt, &z, weights)?;
        let l_kl = kl_to_standard(dist)?;
        let loss = joint_loss(scores.cross_score, scores.self_score, l_kl, weights);
        let (kl_mu, kl_sigma) = kl_gradient(dist);
        let grad_mu = g_z.iter().zip(&kl_mu).map(|(g, k)| g + weights.kl * k).collect();
        let grad_sigma = g_z
            .iter()
            .zip(&base.eps.data)
            .zip(&kl_sigma)
            .map(|((g, e), k)| g * e + weights.kl * k)
            .collect();
        Ok(LossGradient {
            scores,
            loss,
            grad_mu,
            grad_sigma,
        })
    }
}

fn check_noise(backend: &dyn DenoiserBackend, noise: &Latent) -> Result<()> {
    if noise.shape != backend.latent_shape() {
        return Err(crate::error::shape_err(format!(
            "noise shape {:?} does not match backend {:?}",
            noise.shape,
            backend.latent_shape()
        )));
    }
    Ok(())
}

/// Scores one noise with the given smoothing settings and thresholds.
pub fn evaluate_noise(
    backend: &dyn DenoiserBackend,
    prompt: &PromptSpec,
    noise: &Latent,
    config: &OptimizationConfig,
) -> Result<ScorePair> {
    Scorer::new(backend.grid(), prompt, config.smoothing, config.thresholds())?.evaluate(backend, prompt, noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub round: usize,
    pub step: usize,
    #[serde(with = "lossy_f64")]
    pub cross_score: f64,
    #[serde(with = "lossy_f64")]
    pub self_score: f64,
    pub valid: bool,
    #[serde(with = "lossy_f64")]
    pub l_kl: f64,
    #[serde(with = "lossy_f64")]
    pub l_joint: f64,
    #[serde(with = "lossy_f64")]
    pub mu_mean: f64,
    #[serde(with = "lossy_f64")]
    pub mu_std: f64,
    #[serde(with = "lossy_f64")]
    pub sigma_mean: f64,
    #[serde(with = "lossy_f64")]
    pub sigma_std: f64,
}

impl StepRecord {
    pub fn total(&self) -> f64 {
        self.cross_score + self.self_score
    }
}

/// Non-finite values are written as `null` and read back as NaN.
pub(crate) mod lossy_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Valid,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub seed: u64,
    pub status: RoundStatus,
    /// Set when the round was cut short by a non-finite loss.
    pub diagnostic: Option<String>,
    pub steps: Vec<StepRecord>,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub status: RoundStatus,
    pub noise: Latent,
    /// Scores of the last evaluation in the round.
    pub scores: ScorePair,
    pub distribution: NoiseDistribution,
    pub trace: RoundTrace,
}

fn summary(xs: &[f64]) -> (f64, f64) {
    let m = crate::noise::mean(xs);
    (m, crate::noise::variance(xs).sqrt())
}

/// Optimizes `(mu, sigma)` for one base noise. Validity is tested before
/// each update; a valid evaluation returns that exact noise.
pub fn optimize_round(
    backend: &dyn DenoiserBackend,
    prompt: &PromptSpec,
    base: &BaseNoise,
    config: &OptimizationConfig,
    round: usize,
) -> Result<RoundOutcome> {
    config.validate()?;
    let scorer = Scorer::new(backend.grid(), prompt, config.smoothing, config.thresholds())?;
    optimize_with(&scorer, backend, prompt, base, config, round)
}

fn optimize_with(
    scorer: &Scorer,
    backend: &dyn DenoiserBackend,
    prompt: &PromptSpec,
    base: &BaseNoise,
    config: &OptimizationConfig,
    round: usize,
) -> Result<RoundOutcome> {
    let shape = base.eps.shape;
    let mut dist = NoiseDistribution::standard(shape);
    let mut adam = AdamState::new(shape.numel(), config.lr);
    let mut trace = RoundTrace {
        round,
        seed: base.seed,
        status: RoundStatus::Exhausted,
        diagnostic: None,
        steps: Vec::new(),
        updates: 0,
    };
    let mut last = None;
    for step in 1..=config.max_steps {
        let g = scorer.joint_loss_gradient(backend, prompt, &dist, base, config.weights)?;
        let scores = g.scores;
        let (mu_mean, mu_std) = summary(&dist.mu);
        let (sigma_mean, sigma_std) = summary(&dist.sigma);
        trace.steps.push(StepRecord {
            round,
            step,
            cross_score: scores.cross_score,
            self_score: scores.self_score,
            valid: scores.valid,
            l_kl: g.loss.l_kl,
            l_joint: g.loss.l_joint,
            mu_mean,
            mu_std,
            sigma_mean,
            sigma_std,
        });
        last = Some(scores);
        if scores.valid {
            trace.status = RoundStatus::Valid;
            return Ok(RoundOutcome {
                status: RoundStatus::Valid,
                noise: reparameterize(&dist, base)?,
                scores,
                distribution: dist,
                trace,
            });
        }
        if !g.loss.l_joint.is_finite() {
            trace.diagnostic = Some(format!("non-finite loss at step {step}"));
            break;
        }
        match adam_update(&mut dist, &g.grad_mu, &g.grad_sigma, &mut adam) {
            Ok(()) => trace.updates += 1,
            Err(InitnoError::Divergent(msg)) => {
                trace.diagnostic = Some(format!("{msg} at step {step}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RoundOutcome {
        status: RoundStatus::Exhausted,
        noise: reparameterize(&dist, base)?,
        scores: last.expect("max_steps >= 1"),
        distribution: dist,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub round: usize,
    pub noise: Latent,
    pub scores: ScorePair,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoisePool {
    pub entries: Vec<PoolEntry>,
}

impl NoisePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: PoolEntry) {
        self.entries.push(entry);
    }
}

/// Entry with the smallest `S_cross + S_self`; ties go to the earliest round
/// and non-finite sums rank last.
pub fn select_from_pool(pool: &NoisePool) -> Result<&PoolEntry> {
    let key = |e: &PoolEntry| {
        let t = e.scores.total();
        if t.is_nan() {
            f64::INFINITY
        } else {
            t
        }
    };
    pool.entries
        .iter()
        .min_by(|a, b| key(a).total_cmp(&key(b)).then(a.round.cmp(&b.round)))
        .ok_or(InitnoError::EmptyPool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Valid,
    PoolFallback,
}

impl TerminalStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalStatus::Valid => "valid",
            TerminalStatus::PoolFallback => "pool-fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub rounds: Vec<RoundTrace>,
    pub status: TerminalStatus,
    /// Round whose noise was returned.
    pub selected_round: usize,
    pub final_scores: ScorePair,
    pub evaluations: usize,
    pub wall_clock_secs: f64,
}

impl OptimizationTrace {
    pub fn total_steps(&self) -> usize {
        self.rounds.iter().map(|r| r.steps.len()).sum()
    }

    pub fn total_updates(&self) -> usize {
        self.rounds.iter().map(|r| r.updates).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitnoResult {
    pub noise: Latent,
    pub distribution: NoiseDistribution,
    pub base: BaseNoise,
    pub pool: NoisePool,
    pub trace: OptimizationTrace,
}

/// Runs up to `max_rounds` rounds, each from fresh base noise seeded by
/// `round_seed(config.seed, r)`.
pub fn initno(backend: &dyn DenoiserBackend, prompt: &PromptSpec, config: &OptimizationConfig) -> Result<InitnoResult> {
    config.validate()?;
    let start = Instant::now();
    let scorer = Scorer::new(backend.grid(), prompt, config.smoothing, config.thresholds())?;
    let shape = backend.latent_shape();
    let mut pool = NoisePool::default();
    let mut rounds = Vec::new();
    let mut pooled = Vec::new();
    for r in 0..config.max_rounds {
        let base = sample_standard(shape, round_seed(config.seed, r));
        let out = optimize_with(&scorer, backend, prompt, &base, config, r)?;
        rounds.push(out.trace.clone());
        if out.status == RoundStatus::Valid {
            let evaluations = rounds.iter().map(|t| t.steps.len()).sum();
            return Ok(InitnoResult {
                noise: out.noise,
                distribution: out.distribution,
                base,
                pool,
                trace: OptimizationTrace {
                    rounds,
                    status: TerminalStatus::Valid,
                    selected_round: r,
                    final_scores: out.scores,
                    evaluations,
                    wall_clock_secs: start.elapsed().as_secs_f64(),
                },
            });
        }
        pool.push(PoolEntry {
            round: r,
            noise: out.noise.clone(),
            scores: out.scores,
        });
        pooled.push((out.distribution, base));
    }
    let best = select_from_pool(&pool)?.clone();
    let (distribution, base) = pooled.swap_remove(best.round);
    let evaluations = rounds.iter().map(|t| t.steps.len()).sum();
    Ok(InitnoResult {
        noise: best.noise,
        distribution,
        base,
        pool,
        trace: OptimizationTrace {
            rounds,
            status: TerminalStatus::PoolFallback,
            selected_round: best.round,
            final_scores: best.scores,
            evaluations,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionOptions {
    pub n_seeds: usize,
    pub run_initno: bool,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedVerdict {
    pub status: TerminalStatus,
    pub scores: ScorePair,
    pub steps: usize,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub index: usize,
    /// Run seed; the raw noise is round 0 of a run with this seed.
    pub seed: u64,
    pub raw: ScorePair,
    pub optimized: Option<OptimizedVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins on `[lo, hi]`; values outside are clamped.
    pub fn build(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for v in values {
            if v.is_nan() {
                continue;
            }
            let f = ((v - lo) / (hi - lo) * bins as f64).floor();
            counts[f.clamp(0.0, (bins - 1) as f64) as usize] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub n_seeds: usize,
    pub thresholds: Thresholds,
    pub raw_valid_fraction: f64,
    pub optimized_valid_fraction: Option<f64>,
    pub cross_histogram: Histogram,
    pub self_histogram: Histogram,
    pub records: Vec<SeedRecord>,
}

/// Scores `n_seeds` raw noises and optionally optimizes each one. Seeds are
/// independent, so they are processed in parallel.
pub fn partition_experiment(
    backend: &dyn DenoiserBackend,
    prompt: &PromptSpec,
    config: &OptimizationConfig,
    options: PartitionOptions,
) -> Result<PartitionReport> {
    if options.run_initno {
        config.validate()?;
    } else {
        config.thresholds().validate_closed()?;
        config.validate_settings()?;
    }
    if options.n_seeds == 0 {
        return Err(arg_err("n_seeds must be at least 1"));
    }
    let scorer = Scorer::new(backend.grid(), prompt, config.smoothing, config.thresholds())?;
    let shape = backend.latent_shape();
    let one = |i: usize| -> Result<SeedRecord> {
        let seed = partition_seed(config.seed, i);
        let base = sample_standard(shape, round_seed(seed, 0));
        let raw = scorer.evaluate(backend, prompt, &base.eps)?;
        let optimized = if options.run_initno {
            let cfg = OptimizationConfig { seed, ..*config };
            let res = initno(backend, prompt, &cfg)?;
            Some(OptimizedVerdict {
                status: res.trace.status,
                scores: res.trace.final_scores,
                steps: res.trace.total_steps(),
                rounds: res.trace.rounds.len(),
            })
        } else {
            None
        };
        Ok(SeedRecord {
            index: i,
            seed,
            raw,
            optimized,
        })
    };
    let run = || {
        (0..options.n_seeds)
            .into_par_iter()
            .map(one)
            .collect::<Result<Vec<_>>>()
    };
    let records = match options.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| arg_err(format!("cannot start worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let n = records.len() as f64;
    let raw_valid_fraction = records.iter().filter(|r| r.raw.valid).count() as f64 / n;
    let optimized_valid_fraction = options.run_initno.then(|| {
        records
            .iter()
            .filter(|r| r.optimized.as_ref().is_some_and(|o| o.status == TerminalStatus::Valid))
            .count() as f64
            / n
    });
    Ok(PartitionReport {
        n_seeds: options.n_seeds,
        thresholds: config.thresholds(),
        raw_valid_fraction,
        optimized_valid_fraction,
        cross_histogram: Histogram::build(records.iter().map(|r| r.raw.cross_score), 0.0, 1.0, 20),
        self_histogram: Histogram::build(records.iter().map(|r| r.raw.self_score), 0.0, 1.0, 20),
        records,
    })
}
