//! The learnable noise distribution, reparameterized sampling, the loss
//! terms of the joint objective and the Adam step that updates `(mu, sigma)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, InitnoError, Result};

/// Lower bound applied to every `sigma` element after an update.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        let s = Self {
            channels,
            height,
            width,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(arg_err(format!("degenerate latent shape {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// A `(C, H, W)` row-major latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub shape: LatentShape,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn new(shape: LatentShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err(format!(
                "latent buffer has {} elements, shape {:?} needs {}",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: LatentShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn mean(&self) -> f64 {
        mean(&self.data)
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        variance(&self.data)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / xs.len() as f64
}

/// Per-element Gaussian `N(mu, sigma^2)` over the latent shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDistribution {
    pub shape: LatentShape,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseDistribution {
    /// `mu = 0`, `sigma = 1`.
    pub fn standard(shape: LatentShape) -> Self {
        Self {
            shape,
            mu: vec![0.0; shape.numel()],
            sigma: vec![1.0; shape.numel()],
        }
    }

    pub fn new(shape: LatentShape, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != shape.numel() || sigma.len() != shape.numel() {
            return Err(shape_err("mu/sigma length does not match latent shape"));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(arg_err("sigma must be strictly positive"));
        }
        Ok(Self { shape, mu, sigma })
    }
}

/// A standard-Gaussian draw together with the seed that reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseNoise {
    pub eps: Latent,
    pub seed: u64,
}

pub fn sample_standard(shape: LatentShape, seed: u64) -> BaseNoise {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    BaseNoise {
        eps: Latent { shape, data },
        seed,
    }
}

/// `mu + sigma * eps`, elementwise.
pub fn reparameterize(dist: &NoiseDistribution, base: &BaseNoise) -> Result<Latent> {
    if dist.shape != base.eps.shape {
        return Err(shape_err(format!(
            "distribution shape {:?} vs noise shape {:?}",
            dist.shape, base.eps.shape
        )));
    }
    let data = dist
        .mu
        .iter()
        .zip(&dist.sigma)
        .zip(&base.eps.data)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Latent::new(dist.shape, data)
}

/// Mean over elements of `KL(N(mu_i, sigma_i^2) || N(0, 1))`.
pub fn kl_to_standard(dist: &NoiseDistribution) -> Result<f64> {
    let mut total = 0.0;
    for (&m, &s) in dist.mu.iter().zip(&dist.sigma) {
        if !(s > 0.0) {
            return Err(arg_err(format!("non-positive sigma {s}")));
        }
        let s2 = s * s;
        total += 0.5 * (m * m + s2 - 1.0 - s2.ln());
    }
    Ok(total / dist.mu.len() as f64)
}

/// Gradient of [`kl_to_standard`] with respect to `(mu, sigma)`.
pub fn kl_gradient(dist: &NoiseDistribution) -> (Vec<f64>, Vec<f64>) {
    let n = dist.mu.len() as f64;
    let gm = dist.mu.iter().map(|m| m / n).collect();
    let gs = dist.sigma.iter().map(|s| (s - 1.0 / s) / n).collect();
    (gm, gs)
}

/// The attention losses are the scores themselves.
pub fn attention_losses(cross_score: f64, self_score: f64) -> (f64, f64) {
    (cross_score, self_score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cross: f64,
    #[serde(rename = "self")]
    pub self_attn: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cross: 1.0,
            self_attn: 1.0,
            kl: 500.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cross, self.self_attn, self.kl]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(arg_err("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cross: f64,
    pub l_self: f64,
    pub l_kl: f64,
    pub l_joint: f64,
    pub weights: LossWeights,
}

pub fn joint_loss(l_cross: f64, l_self: f64, l_kl: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_cross,
        l_self,
        l_kl,
        l_joint: weights.cross * l_cross + weights.self_attn * l_self + weights.kl * l_kl,
        weights,
    }
}

/// Adam moments for `(mu, sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_elements: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; 2 * n_elements],
            v: vec![0.0; 2 * n_elements],
        }
    }
}

/// One bias-corrected Adam step on `mu` and `sigma`, then the sigma floor.
pub fn adam_update(
    dist: &mut NoiseDistribution,
    grad_mu: &[f64],
    grad_sigma: &[f64],
    state: &mut AdamState,
) -> Result<()> {
    let n = dist.mu.len();
    if grad_mu.len() != n || grad_sigma.len() != n || state.m.len() != 2 * n {
        return Err(shape_err("gradient shapes do not match parameters"));
    }
    if grad_mu.iter().chain(grad_sigma).any(|g| !g.is_finite()) {
        return Err(InitnoError::Divergent("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let params = dist.mu.iter_mut().chain(dist.sigma.iter_mut());
    let grads = grad_mu.iter().chain(grad_sigma);
    for (((p, g), m), v) in params.zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    for s in dist.sigma.iter_mut() {
        *s = s.max(SIGMA_FLOOR);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> LatentShape {
        LatentShape::new(1, 4, 4).unwrap()
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_standard(shape(), 7);
        assert_eq!(a, sample_standard(shape(), 7));
        assert_ne!(a.eps.data, sample_standard(shape(), 8).eps.data);
    }

    #[test]
    fn reparameterize_identity_and_degenerate() {
        let base = sample_standard(shape(), 1);
        let id = reparameterize(&NoiseDistribution::standard(shape()), &base).unwrap();
        assert_eq!(id, base.eps);
        let d = NoiseDistribution::new(shape(), vec![2.5; 16], vec![SIGMA_FLOOR; 16]).unwrap();
        let z = reparameterize(&d, &base).unwrap();
        assert!(z.data.iter().all(|v| (v - 2.5).abs() < 1e-3));
        let other = sample_standard(LatentShape::new(1, 2, 2).unwrap(), 1);
        assert!(reparameterize(&d, &other).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let s = shape();
        assert_eq!(kl_to_standard(&NoiseDistribution::standard(s)).unwrap(), 0.0);
        let d = NoiseDistribution::new(s, vec![1.0; 16], vec![1.0; 16]).unwrap();
        assert!((kl_to_standard(&d).unwrap() - 0.5).abs() < 1e-12);
        let d = NoiseDistribution::new(s, vec![0.0; 16], vec![2.0; 16]).unwrap();
        let expect = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl_to_standard(&d).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let s = LatentShape::new(1, 1, 3).unwrap();
        let d = NoiseDistribution::new(s, vec![0.3, -1.2, 0.0], vec![0.5, 1.7, 1.0]).unwrap();
        let (gm, gs) = kl_gradient(&d);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = d.clone();
            let mut m = d.clone();
            p.mu[i] += h;
            m.mu[i] -= h;
            let num = (kl_to_standard(&p).unwrap() - kl_to_standard(&m).unwrap()) / (2.0 * h);
            assert!((num - gm[i]).abs() < 1e-8);
            let mut p = d.clone();
            let mut m = d.clone();
            p.sigma[i] += h;
            m.sigma[i] -= h;
            let num = (kl_to_standard(&p).unwrap() - kl_to_standard(&m).unwrap()) / (2.0 * h);
            assert!((num - gs[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(attention_losses(0.4, 0.2), (0.4, 0.2));
        assert_eq!(attention_losses(0.0, 0.0), (0.0, 0.0));
        assert_eq!(attention_losses(1.0, 0.5), (1.0, 0.5));
        let b = joint_loss(0.4, 0.2, 0.001, LossWeights::default());
        assert!((b.l_joint - 1.1).abs() < 1e-12);
        assert_eq!(joint_loss(0.0, 0.0, 0.0, LossWeights::default()).l_joint, 0.0);
        let w = LossWeights {
            cross: 2.0,
            self_attn: 0.0,
            kl: 500.0,
        };
        assert!((joint_loss(0.3, 0.1, 0.0, w).l_joint - 0.6).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let s = LatentShape::new(1, 1, 3).unwrap();
        let mut d = NoiseDistribution::standard(s);
        let mut st = AdamState::new(3, 1e-2);
        adam_update(&mut d, &[0.0; 3], &[0.0; 3], &mut st).unwrap();
        assert_eq!(d, NoiseDistribution::standard(s));

        let mut d = NoiseDistribution::standard(s);
        let mut st = AdamState::new(3, 1e-2);
        adam_update(&mut d, &[0.5, -3.0, 0.0], &[0.0; 3], &mut st).unwrap();
        assert!((d.mu[0] + 1e-2).abs() < 1e-9);
        assert!((d.mu[1] - 1e-2).abs() < 1e-9);
        assert_eq!(d.mu[2], 0.0);
    }

    #[test]
    fn adam_rejects_nan_and_floors_sigma() {
        let s = LatentShape::new(1, 1, 2).unwrap();
        let mut d = NoiseDistribution::standard(s);
        let mut st = AdamState::new(2, 1e-2);
        let err = adam_update(&mut d, &[f64::NAN, 0.0], &[0.0; 2], &mut st).unwrap_err();
        assert!(err.to_string().starts_with("divergent optimization"));

        let mut d = NoiseDistribution::new(s, vec![0.0; 2], vec![2e-4, 1.0]).unwrap();
        let mut st = AdamState::new(2, 1.0);
        adam_update(&mut d, &[0.0; 2], &[1.0, 0.0], &mut st).unwrap();
        assert_eq!(d.sigma[0], SIGMA_FLOOR);
    }

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let s = LatentShape::new(1, 1, 2).unwrap();
        let d0 = NoiseDistribution::new(s, vec![0.3, -0.1], vec![0.9, 1.1]).unwrap();
        let mut d = d0.clone();
        let mut st = AdamState::new(2, 0.0);
        adam_update(&mut d, &[1.0, -2.0], &[0.5, 0.5], &mut st).unwrap();
        assert_eq!(d, d0);
    }
}
