//! Analytic backend: a single attention layer whose maps are exactly
//! `softmax(Q K^T / sqrt(d))` for caller-supplied projections. Useful for
//! hand-checked oracles, finite-difference checks and engineered stubs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Grid;
use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::noise::{Latent, LatentShape};
use crate::tensor::Matrix;

use super::toy::standard_matrix;
use super::{check_latent, check_timestep, patch_features, patch_indices, DenoiserBackend, TracedStep};

/// Projections for one head. For cross heads `key` maps token embeddings;
/// for self heads it maps patch features. Biases are per-patch offsets added
/// after projection (`key_bias` is only used by self heads).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHead {
    pub query: Matrix,
    pub query_bias: Option<Matrix>,
    pub key: Matrix,
    pub key_bias: Option<Matrix>,
}

impl SyntheticHead {
    pub fn new(query: Matrix, key: Matrix) -> Self {
        Self {
            query,
            query_bias: None,
            key,
            key_bias: None,
        }
    }

    fn head_dim(&self) -> usize {
        self.query.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub latent_shape: LatentShape,
    pub grid: Grid,
    pub cross_heads: Vec<SyntheticHead>,
    pub self_heads: Vec<SyntheticHead>,
}

pub struct SyntheticBackend {
    params: SyntheticParams,
    patch_idx: Arc<Vec<usize>>,
}

impl SyntheticBackend {
    pub fn new(params: SyntheticParams) -> Result<Self> {
        params.latent_shape.validate()?;
        let patch_idx = patch_indices(params.latent_shape, params.grid)?;
        let f = patch_features(params.latent_shape, params.grid);
        let p = params.grid.area();
        if params.cross_heads.is_empty() || params.self_heads.is_empty() {
            return Err(arg_err("synthetic backend needs at least one cross and one self head"));
        }
        for (kind, heads) in [("cross", &params.cross_heads), ("self", &params.self_heads)] {
            for (i, h) in heads.iter().enumerate() {
                let d = h.head_dim();
                if h.query.rows() != f || d == 0 || h.key.cols() != d {
                    return Err(shape_err(format!(
                        "{kind} head {i}: query {:?} / key {:?} incompatible with {f} patch features",
                        h.query.shape(),
                        h.key.shape()
                    )));
                }
                if kind == "self" && h.key.rows() != f {
                    return Err(shape_err(format!("self head {i}: key must have {f} rows")));
                }
                for b in [&h.query_bias, &h.key_bias].into_iter().flatten() {
                    if b.shape() != (p, d) {
                        return Err(shape_err(format!("{kind} head {i}: bias must be {p}x{d}")));
                    }
                }
            }
        }
        Ok(Self { params, patch_idx })
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    /// Zero projections: every map is uniform.
    pub fn uniform(latent_shape: LatentShape, grid: Grid, token_dim: usize) -> Result<Self> {
        let f = patch_features(latent_shape, grid);
        Self::new(SyntheticParams {
            latent_shape,
            grid,
            cross_heads: vec![SyntheticHead::new(Matrix::zeros(f, 1), Matrix::zeros(token_dim, 1))],
            self_heads: vec![SyntheticHead::new(Matrix::zeros(f, 1), Matrix::zeros(f, 1))],
        })
    }

    /// Gaussian projections with standard deviation `scale`.
    pub fn random(
        seed: u64,
        latent_shape: LatentShape,
        grid: Grid,
        token_dim: usize,
        head_dim: usize,
        n_heads: usize,
        scale: f64,
    ) -> Result<Self> {
        let f = patch_features(latent_shape, grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = |key_rows: usize| {
            SyntheticHead::new(
                standard_matrix(&mut rng, f, head_dim).scale(scale),
                standard_matrix(&mut rng, key_rows, head_dim).scale(scale),
            )
        };
        let cross_heads = (0..n_heads).map(|_| head(token_dim)).collect();
        let self_heads = (0..n_heads).map(|_| head(f)).collect();
        Self::new(SyntheticParams {
            latent_shape,
            grid,
            cross_heads,
            self_heads,
        })
    }

    /// Latent-independent maps that pass any thresholds in `(0, 1)` for
    /// prompts embedded with [`one_hot_embeddings`]: each target owns a
    /// vertical stripe of the grid and self-attention is the identity.
    /// Needs grid width of at least 3 cells per target.
    pub fn always_valid(latent_shape: LatentShape, grid: Grid, n_tokens: usize, targets: &[usize]) -> Result<Self> {
        if targets.is_empty() || grid.width < 3 * targets.len() {
            return Err(arg_err("always-valid preset needs >= 3 grid columns per target"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_tokens) {
            return Err(arg_err(format!("target {bad} out of range")));
        }
        let f = patch_features(latent_shape, grid);
        let p = grid.area();
        let stripe = grid.width / targets.len();
        let sharp = 50.0;
        let cross_bias = Matrix::from_fn(p, n_tokens, |cell, tok| {
            let (_, y) = grid.coords(cell);
            let owner = targets[(y / stripe).min(targets.len() - 1)];
            if tok == owner {
                sharp * (n_tokens as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut cross = SyntheticHead::new(Matrix::zeros(f, n_tokens), Matrix::identity(n_tokens));
        cross.query_bias = Some(cross_bias);
        let mut selfh = SyntheticHead::new(Matrix::zeros(f, p), Matrix::zeros(f, p));
        selfh.query_bias = Some(Matrix::identity(p).scale(sharp));
        selfh.key_bias = Some(Matrix::identity(p).scale((p as f64).sqrt()));
        Self::new(SyntheticParams {
            latent_shape,
            grid,
            cross_heads: vec![cross],
            self_heads: vec![selfh],
        })
    }

    /// Random latent-dependent cross attention with uniform self-attention:
    /// any two targets conflict at exactly 0.5, so no noise is valid for
    /// `tau_s <= 0.5` and prompts with at least two targets.
    pub fn never_valid(seed: u64, latent_shape: LatentShape, grid: Grid, token_dim: usize, scale: f64) -> Result<Self> {
        let f = patch_features(latent_shape, grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cross = SyntheticHead::new(
            standard_matrix(&mut rng, f, 4).scale(scale),
            standard_matrix(&mut rng, token_dim, 4).scale(scale),
        );
        Self::new(SyntheticParams {
            latent_shape,
            grid,
            cross_heads: vec![cross],
            self_heads: vec![SyntheticHead::new(Matrix::zeros(f, 1), Matrix::zeros(f, 1))],
        })
    }

    /// Adversarial preset on a 1x1 grid: the whole latent is one patch and
    /// every target's cross-attention logit is `strength` times the latent
    /// mean, so the cross loss pushes all elements upwards. With two or more
    /// targets the single self map makes the conflict exactly 0.5, so no
    /// noise is ever valid for `tau_s <= 0.5`. Intended for prompts embedded
    /// with [`one_hot_embeddings`] that include a non-target content token.
    pub fn mean_seeking(latent_shape: LatentShape, n_tokens: usize, targets: &[usize], strength: f64) -> Result<Self> {
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_tokens) {
            return Err(arg_err(format!("target {bad} out of range")));
        }
        let grid = Grid::new(1, 1);
        let f = patch_features(latent_shape, grid);
        let query = Matrix::filled(f, 1, strength / f as f64);
        let key = Matrix::from_fn(n_tokens, 1, |r, _| if targets.contains(&r) { 1.0 } else { 0.0 });
        Self::new(SyntheticParams {
            latent_shape,
            grid,
            cross_heads: vec![SyntheticHead::new(query, key)],
            self_heads: vec![SyntheticHead::new(Matrix::zeros(f, 1), Matrix::zeros(f, 1))],
        })
    }
}

/// Identity embeddings: token `i` is the `i`-th unit vector.
pub fn one_hot_embeddings(n_tokens: usize) -> Matrix {
    Matrix::identity(n_tokens)
}

impl DenoiserBackend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn latent_shape(&self) -> LatentShape {
        self.params.latent_shape
    }

    fn grid(&self) -> Grid {
        self.params.grid
    }

    /// Predicted noise is the input latent; attention follows the supplied
    /// projections exactly.
    fn trace_step(
        &self,
        tape: &mut Tape,
        latent: Var,
        embeddings: &Matrix,
        t: usize,
        num_steps: usize,
    ) -> Result<TracedStep> {
        check_timestep(t, num_steps)?;
        let shape = self.params.latent_shape;
        check_latent(tape, latent, shape)?;
        let p = self.params.grid.area();
        let f = patch_features(shape, self.params.grid);
        let x = tape.gather(latent, self.patch_idx.clone(), p, f)?;
        let tokens = tape.constant(embeddings.clone());

        let project = |tape: &mut Tape, input: Var, w: &Matrix, bias: &Option<Matrix>| -> Result<Var> {
            let w = tape.constant(w.clone());
            let mut out = tape.matmul(input, w)?;
            if let Some(b) = bias {
                let b = tape.constant(b.clone());
                out = tape.add(out, b)?;
            }
            Ok(out)
        };

        let mut cross = Vec::new();
        for (i, h) in self.params.cross_heads.iter().enumerate() {
            if h.key.rows() != embeddings.cols() {
                return Err(shape_err(format!(
                    "cross head {i} expects {}-dim token embeddings, got {}",
                    h.key.rows(),
                    embeddings.cols()
                )));
            }
            let q = project(tape, x, &h.query, &h.query_bias)?;
            let k = project(tape, tokens, &h.key, &None)?;
            let logits = tape.matmul_nt(q, k)?;
            let logits = tape.scale(logits, 1.0 / (h.head_dim() as f64).sqrt());
            cross.push((0, i, tape.softmax_rows(logits)));
        }
        let mut self_attn = Vec::new();
        for (i, h) in self.params.self_heads.iter().enumerate() {
            let q = project(tape, x, &h.query, &h.query_bias)?;
            let k = project(tape, x, &h.key, &h.key_bias)?;
            let logits = tape.matmul_nt(q, k)?;
            let logits = tape.scale(logits, 1.0 / (h.head_dim() as f64).sqrt());
            self_attn.push((0, i, tape.softmax_rows(logits)));
        }
        let predicted = Latent::new(shape, tape.value(latent).as_slice().to_vec())?;
        Ok(TracedStep {
            predicted_noise: predicted,
            cross,
            self_attn,
            timestep: t,
        })
    }
}
