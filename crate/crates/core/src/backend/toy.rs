//! A seeded, desk-scale stand-in for a text-conditioned denoiser.
//!
//! Patches of the latent are blurred, projected to the model width and
//! offset by random-Fourier positional features. Each layer runs a
//! multi-head self-attention block, a multi-head cross-attention block over
//! the prompt embeddings and a tanh MLP, all residual. Self-attention uses
//! tied query/key projections, which together with the positional features
//! makes each patch attend mostly to its neighbourhood.
//!
//! The noise prediction is the closed-form optimal denoiser for a zero-mean
//! Gaussian latent prior plus a small prompt-dependent residual read out of
//! the final hidden state.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{smoothing_operator, Grid};
use crate::autodiff::{SparseOperator, Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::noise::{Latent, LatentShape};
use crate::tensor::Matrix;

use super::{check_latent, check_timestep, patch_features, patch_indices, DenoiserBackend, NoiseSchedule, TracedStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    pub latent_shape: LatentShape,
    pub grid: Grid,
    /// Model width; prompt embeddings must have this many columns.
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub head_dim: usize,
    /// Standard deviation of the input blur, in grid cells.
    pub input_blur: f64,
    pub input_gain: f64,
    pub pos_gain: f64,
    /// Correlation length of the positional features, in grid cells.
    pub pos_length: f64,
    pub self_logit_scale: f64,
    pub cross_logit_scale: f64,
    /// Logit offset for the first prompt token, which acts as an attention
    /// sink the way a start token does.
    pub sot_bias: f64,
    pub residual_scale: f64,
    /// Standard deviation of the Gaussian latent prior.
    pub prior_std: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_shape: LatentShape {
                channels: 4,
                height: 16,
                width: 16,
            },
            grid: Grid::new(16, 16),
            embed_dim: 32,
            n_heads: 2,
            n_layers: 2,
            head_dim: 16,
            input_blur: 1.0,
            input_gain: 2.0,
            pos_gain: 1.0,
            pos_length: 6.0,
            self_logit_scale: 0.5,
            cross_logit_scale: 1.0,
            sot_bias: 6.5,
            residual_scale: 0.05,
            prior_std: 0.5,
        }
    }
}

struct Block {
    qk: Vec<Matrix>,
    v: Vec<Matrix>,
    out: Matrix,
}

struct CrossBlock {
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    out: Matrix,
}

struct Layer {
    self_block: Block,
    cross_block: CrossBlock,
    mlp_in: Matrix,
    mlp_out: Matrix,
}

pub struct ToyDenoiser {
    config: ToyConfig,
    patch_idx: Arc<Vec<usize>>,
    blur: Arc<SparseOperator>,
    input_proj: Matrix,
    positional: Matrix,
    layers: Vec<Layer>,
    readout: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let d = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let c = &config;
        c.latent_shape.validate()?;
        if c.grid.area() < 4 {
            return Err(arg_err("toy grid needs at least 4 cells"));
        }
        if c.n_heads == 0 || c.n_layers == 0 || c.embed_dim == 0 || c.head_dim == 0 {
            return Err(arg_err("toy denoiser dimensions must be positive"));
        }
        let patch_idx = patch_indices(c.latent_shape, c.grid)?;
        let features = patch_features(c.latent_shape, c.grid);
        let blur_size = 2 * (2.0 * c.input_blur).ceil() as usize + 1;
        let blur = Arc::new(SparseOperator::new(smoothing_operator(
            c.grid,
            blur_size,
            c.input_blur,
        )?));

        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let d = c.embed_dim;
        let dh = c.head_dim;
        let input_proj = gaussian(&mut rng, features, d, c.input_gain / (features as f64).sqrt());

        // Random Fourier features approximating a Gaussian kernel over grid
        // coordinates with length scale `pos_length`.
        let freq = Normal::new(0.0, 1.0 / c.pos_length).expect("finite");
        let phase = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        let omegas: Vec<(f64, f64, f64)> = (0..d)
            .map(|_| (freq.sample(&mut rng), freq.sample(&mut rng), phase.sample(&mut rng)))
            .collect();
        let amp = c.pos_gain * (2.0 / d as f64).sqrt() * (d as f64).sqrt();
        let positional = Matrix::from_fn(c.grid.area(), d, |p, k| {
            let (x, y) = c.grid.coords(p);
            let (wx, wy, b) = omegas[k];
            amp * (wx * x as f64 + wy * y as f64 + b).cos()
        });

        let proj_std = 1.0 / (d as f64).sqrt();
        let layers = (0..c.n_layers)
            .map(|_| Layer {
                self_block: Block {
                    qk: (0..c.n_heads).map(|_| gaussian(&mut rng, d, dh, proj_std)).collect(),
                    v: (0..c.n_heads).map(|_| gaussian(&mut rng, d, dh, proj_std)).collect(),
                    out: gaussian(&mut rng, c.n_heads * dh, d, 0.5 / ((c.n_heads * dh) as f64).sqrt()),
                },
                cross_block: CrossBlock {
                    q: (0..c.n_heads).map(|_| gaussian(&mut rng, d, dh, proj_std)).collect(),
                    k: (0..c.n_heads).map(|_| gaussian(&mut rng, d, dh, proj_std)).collect(),
                    v: (0..c.n_heads).map(|_| gaussian(&mut rng, d, dh, proj_std)).collect(),
                    out: gaussian(&mut rng, c.n_heads * dh, d, 0.5 / ((c.n_heads * dh) as f64).sqrt()),
                },
                mlp_in: gaussian(&mut rng, d, 2 * d, proj_std),
                mlp_out: gaussian(&mut rng, 2 * d, d, 0.5 / ((2 * d) as f64).sqrt()),
            })
            .collect();
        let readout = gaussian(&mut rng, d, features, proj_std);

        Ok(Self {
            config,
            patch_idx,
            blur,
            input_proj,
            positional,
            layers,
            readout,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn time_embedding(&self, t: usize, num_steps: usize) -> Vec<f64> {
        let d = self.config.embed_dim;
        let s = t as f64 / num_steps.max(1) as f64;
        (0..d)
            .map(|k| {
                let f = (k / 2 + 1) as f64;
                0.1 * if k % 2 == 0 { (f * s).sin() } else { (f * s).cos() }
            })
            .collect()
    }
}

impl DenoiserBackend for ToyDenoiser {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> LatentShape {
        self.config.latent_shape
    }

    fn grid(&self) -> Grid {
        self.config.grid
    }

    fn schedule(&self, num_steps: usize) -> Option<NoiseSchedule> {
        Some(NoiseSchedule::linear(num_steps))
    }

    fn trace_step(
        &self,
        tape: &mut Tape,
        latent: Var,
        embeddings: &Matrix,
        t: usize,
        num_steps: usize,
    ) -> Result<TracedStep> {
        let c = &self.config;
        check_timestep(t, num_steps)?;
        check_latent(tape, latent, c.latent_shape)?;
        if embeddings.cols() != c.embed_dim || embeddings.rows() == 0 {
            return Err(shape_err(format!(
                "toy denoiser expects n x {} token embeddings, got {:?}",
                c.embed_dim,
                embeddings.shape()
            )));
        }
        let p = c.grid.area();
        let features = patch_features(c.latent_shape, c.grid);
        let x = tape.gather(latent, self.patch_idx.clone(), p, features)?;
        let x = tape.sparse_left_mul(self.blur.clone(), x)?;
        let w_in = tape.constant(self.input_proj.clone());
        let mut h = tape.matmul(x, w_in)?;
        let temb = self.time_embedding(t, num_steps);
        let offset = Matrix::from_fn(p, c.embed_dim, |r, k| self.positional.get(r, k) + temb[k]);
        let offset = tape.constant(offset);
        h = tape.add(h, offset)?;

        let tokens = tape.constant(embeddings.clone());
        let sink = tape.constant(Matrix::from_fn(p, embeddings.rows(), |_, k| {
            if k == 0 {
                c.sot_bias
            } else {
                0.0
            }
        }));
        let inv_sqrt = 1.0 / (c.head_dim as f64).sqrt();
        let mut cross = Vec::new();
        let mut self_attn = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut heads = Vec::with_capacity(c.n_heads);
            for hi in 0..c.n_heads {
                let wqk = tape.constant(layer.self_block.qk[hi].clone());
                let q = tape.matmul(h, wqk)?;
                let logits = tape.matmul_nt(q, q)?;
                let logits = tape.scale(logits, c.self_logit_scale * inv_sqrt);
                let attn = tape.softmax_rows(logits);
                self_attn.push((li, hi, attn));
                let wv = tape.constant(layer.self_block.v[hi].clone());
                let v = tape.matmul(h, wv)?;
                heads.push(tape.matmul(attn, v)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let wo = tape.constant(layer.self_block.out.clone());
            let o = tape.matmul(cat, wo)?;
            h = tape.add(h, o)?;

            let mut heads = Vec::with_capacity(c.n_heads);
            for hi in 0..c.n_heads {
                let wq = tape.constant(layer.cross_block.q[hi].clone());
                let q = tape.matmul(h, wq)?;
                let wk = tape.constant(layer.cross_block.k[hi].clone());
                let k = tape.matmul(tokens, wk)?;
                let logits = tape.matmul_nt(q, k)?;
                let logits = tape.scale(logits, c.cross_logit_scale * inv_sqrt);
                let logits = tape.add(logits, sink)?;
                let attn = tape.softmax_rows(logits);
                cross.push((li, hi, attn));
                let wv = tape.constant(layer.cross_block.v[hi].clone());
                let v = tape.matmul(tokens, wv)?;
                heads.push(tape.matmul(attn, v)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let wo = tape.constant(layer.cross_block.out.clone());
            let o = tape.matmul(cat, wo)?;
            h = tape.add(h, o)?;

            let w1 = tape.constant(layer.mlp_in.clone());
            let a = tape.matmul(h, w1)?;
            let a = tape.tanh(a);
            let w2 = tape.constant(layer.mlp_out.clone());
            let o = tape.matmul(a, w2)?;
            h = tape.add(h, o)?;
        }

        let residual = tape.value(h).matmul(&self.readout)?;
        let schedule = NoiseSchedule::linear(num_steps);
        let abar = schedule.alpha_bar(t);
        let noise_std = (1.0 - abar).sqrt();
        let prior_gain = noise_std / (abar * c.prior_std * c.prior_std + 1.0 - abar);
        let z = tape.value(latent).as_slice();
        let mut eps = vec![0.0; z.len()];
        // `residual` is laid out like the gathered patch matrix.
        for (i, &flat) in self.patch_idx.iter().enumerate() {
            let r = residual.as_slice()[i];
            eps[flat] = prior_gain * z[flat] + c.residual_scale * noise_std * r;
        }
        Ok(TracedStep {
            predicted_noise: Latent::new(c.latent_shape, eps)?,
            cross,
            self_attn,
            timestep: t,
        })
    }
}

/// Draws a standard-normal matrix; used by tests and presets.
pub(crate) fn standard_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}
