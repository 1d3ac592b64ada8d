//! Denoiser backends: one denoising step from a latent and a prompt, with the
//! per-layer, per-head attention maps recorded on an autodiff tape.

mod adapter;
mod schedule;
mod synthetic;
mod toy;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use adapter::{AdapterRequest, AdapterResponse, ADAPTER_SCHEMA};
pub use schedule::NoiseSchedule;
pub use synthetic::{one_hot_embeddings, SyntheticBackend, SyntheticHead, SyntheticParams};
pub use toy::{ToyConfig, ToyDenoiser};

use crate::attention::{AttentionKind, AttentionStack, Grid, TokenIndexSet};
use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, shape_err, InitnoError, Result};
use crate::noise::{Latent, LatentShape};
use crate::seed::derive_seed;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    /// One row per prompt token, start token included.
    pub token_embeddings: Matrix,
    pub target_tokens: TokenIndexSet,
    pub guidance_scale: f64,
    pub num_denoise_steps: usize,
}

impl PromptSpec {
    pub fn new(token_embeddings: Matrix, target_tokens: TokenIndexSet) -> Result<Self> {
        let p = Self {
            token_embeddings,
            target_tokens,
            guidance_scale: 7.5,
            num_denoise_steps: 50,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_guidance(mut self, guidance_scale: f64, num_denoise_steps: usize) -> Result<Self> {
        self.guidance_scale = guidance_scale;
        self.num_denoise_steps = num_denoise_steps;
        self.validate()?;
        Ok(self)
    }

    pub fn n_tokens(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tokens() < 2 {
            return Err(arg_err("a prompt needs the start token and at least one content token"));
        }
        if !(self.guidance_scale > 0.0) {
            return Err(arg_err("guidance scale must be positive"));
        }
        self.target_tokens.validate(self.n_tokens())
    }

    /// The unconditional branch: only the start token.
    pub fn unconditional_embeddings(&self) -> Matrix {
        let sot = self.target_tokens.sot_index();
        Matrix::from_vec(1, self.token_embeddings.cols(), self.token_embeddings.row(sot).to_vec()).expect("row copy")
    }
}

/// Fixed pseudo-random embedding per vocabulary id, identical across runs.
pub fn embed_tokens(ids: &[u32], dim: usize) -> Matrix {
    let mut m = Matrix::zeros(ids.len(), dim);
    for (r, &id) in ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x76_6f63_6162, u64::from(id)));
        for v in m.row_mut(r) {
            let x: f64 = StandardNormal.sample(&mut rng);
            *v = x;
        }
    }
    m
}

/// Attention and prediction recorded on a tape for one step.
pub struct TracedStep {
    pub predicted_noise: Latent,
    pub cross: Vec<(usize, usize, Var)>,
    pub self_attn: Vec<(usize, usize, Var)>,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseStepResult {
    pub predicted_noise: Latent,
    pub cross_stack: AttentionStack,
    pub self_stack: AttentionStack,
    pub timestep: usize,
}

pub trait DenoiserBackend: Send + Sync {
    fn name(&self) -> &str;

    fn latent_shape(&self) -> LatentShape;

    fn grid(&self) -> Grid;

    fn differentiable(&self) -> bool {
        true
    }

    /// Runs the conditional branch for `embeddings` at timestep `t` of a
    /// `num_steps` schedule. `latent` is a `1 x numel` node in `(C, H, W)`
    /// row-major order. Implementations must be pure functions of their inputs.
    fn trace_step(
        &self,
        tape: &mut Tape,
        latent: Var,
        embeddings: &Matrix,
        t: usize,
        num_steps: usize,
    ) -> Result<TracedStep>;

    /// Backends without a sampler are scoring-only.
    fn schedule(&self, _num_steps: usize) -> Option<NoiseSchedule> {
        None
    }
}

pub(crate) fn check_timestep(t: usize, num_steps: usize) -> Result<()> {
    if t == 0 || t > num_steps {
        return Err(InitnoError::UnsupportedTimestep { t, max: num_steps });
    }
    Ok(())
}

pub(crate) fn check_latent(tape: &Tape, latent: Var, shape: LatentShape) -> Result<()> {
    if tape.value(latent).shape() != (1, shape.numel()) {
        return Err(shape_err(format!(
            "latent node has shape {:?}, backend expects 1x{} ({:?})",
            tape.value(latent).shape(),
            shape.numel(),
            shape
        )));
    }
    Ok(())
}

/// Gather indices turning a flat `(C, H, W)` latent into a patch matrix of
/// shape `(grid area) x (C * ph * pw)`; features are ordered `(c, dy, dx)`.
pub fn patch_indices(shape: LatentShape, grid: Grid) -> Result<Arc<Vec<usize>>> {
    if grid.area() == 0 || !shape.height.is_multiple_of(grid.height) || !shape.width.is_multiple_of(grid.width) {
        return Err(arg_err(format!(
            "latent {}x{} is not divisible into a {}x{} grid",
            shape.height, shape.width, grid.height, grid.width
        )));
    }
    let ph = shape.height / grid.height;
    let pw = shape.width / grid.width;
    let mut idx = Vec::with_capacity(shape.numel());
    for gx in 0..grid.height {
        for gy in 0..grid.width {
            for c in 0..shape.channels {
                for dy in 0..ph {
                    for dx in 0..pw {
                        let row = gx * ph + dy;
                        let col = gy * pw + dx;
                        idx.push((c * shape.height + row) * shape.width + col);
                    }
                }
            }
        }
    }
    Ok(Arc::new(idx))
}

pub fn patch_features(shape: LatentShape, grid: Grid) -> usize {
    shape.numel() / grid.area().max(1)
}

fn collect_stack(tape: &Tape, kind: AttentionKind, grid: Grid, vars: &[(usize, usize, Var)]) -> AttentionStack {
    let mut stack = AttentionStack::new(kind, grid);
    for &(layer, head, v) in vars {
        stack.push(layer, head, tape.value(v).clone());
    }
    stack
}

/// One conditional denoising step, returning plain (non-traced) results.
pub fn denoise_step(
    backend: &dyn DenoiserBackend,
    latent: &Latent,
    prompt: &PromptSpec,
    t: usize,
) -> Result<DenoiseStepResult> {
    check_timestep(t, prompt.num_denoise_steps)?;
    if latent.shape != backend.latent_shape() {
        return Err(shape_err(format!(
            "latent shape {:?} does not match backend {:?}",
            latent.shape,
            backend.latent_shape()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.constant(Matrix::from_vec(1, latent.data.len(), latent.data.clone())?);
    let step = backend.trace_step(&mut tape, z, &prompt.token_embeddings, t, prompt.num_denoise_steps)?;
    Ok(DenoiseStepResult {
        predicted_noise: step.predicted_noise,
        cross_stack: collect_stack(&tape, AttentionKind::Cross, backend.grid(), &step.cross),
        self_stack: collect_stack(&tape, AttentionKind::SelfAttention, backend.grid(), &step.self_attn),
        timestep: t,
    })
}

fn predict(
    backend: &dyn DenoiserBackend,
    latent: &Latent,
    embeddings: &Matrix,
    t: usize,
    steps: usize,
) -> Result<Latent> {
    let mut tape = Tape::new();
    let z = tape.constant(Matrix::from_vec(1, latent.data.len(), latent.data.clone())?);
    Ok(backend.trace_step(&mut tape, z, embeddings, t, steps)?.predicted_noise)
}

/// Classifier-free-guided noise prediction at timestep `t`.
pub fn guided_noise(backend: &dyn DenoiserBackend, latent: &Latent, prompt: &PromptSpec, t: usize) -> Result<Latent> {
    let steps = prompt.num_denoise_steps;
    let cond = predict(backend, latent, &prompt.token_embeddings, t, steps)?;
    let uncond = predict(backend, latent, &prompt.unconditional_embeddings(), t, steps)?;
    let g = prompt.guidance_scale;
    let data = uncond
        .data
        .iter()
        .zip(&cond.data)
        .map(|(u, c)| u + g * (c - u))
        .collect();
    Latent::new(latent.shape, data)
}

/// Runs the backend's sampler from `t = T` down to `t = 1`.
pub fn full_denoise(backend: &dyn DenoiserBackend, latent: &Latent, prompt: &PromptSpec) -> Result<Latent> {
    let steps = prompt.num_denoise_steps;
    if steps == 0 {
        return Ok(latent.clone());
    }
    let schedule = backend.schedule(steps).ok_or(InitnoError::ScoringOnlyBackend)?;
    let mut x = latent.clone();
    for t in (1..=steps).rev() {
        let eps = guided_noise(backend, &x, prompt, t)?;
        x = schedule.step(&x, &eps, t)?;
    }
    Ok(x)
}
