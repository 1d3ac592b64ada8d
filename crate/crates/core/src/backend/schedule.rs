use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::noise::Latent;

use super::check_timestep;

/// Linear-beta DDPM schedule indexed by `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub const BETA_START: f64 = 1e-3;
    pub const BETA_END: f64 = 0.2;

    pub fn linear(num_steps: usize) -> Self {
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    Self::BETA_END
                } else {
                    let f = i as f64 / (num_steps - 1) as f64;
                    Self::BETA_START + f * (Self::BETA_END - Self::BETA_START)
                }
            })
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alphas_cumprod }
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal fraction `alpha_bar_t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t - 1]
    }

    /// Deterministic DDPM posterior-mean update `x_t -> x_{t-1}`.
    pub fn step(&self, x: &Latent, eps: &Latent, t: usize) -> Result<Latent> {
        check_timestep(t, self.num_steps())?;
        if x.shape != eps.shape {
            return Err(shape_err("noise prediction shape differs from latent"));
        }
        let beta = self.beta(t);
        let coef = beta / (1.0 - self.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let data = x
            .data
            .iter()
            .zip(&eps.data)
            .map(|(xv, ev)| inv_sqrt_alpha * (xv - coef * ev))
            .collect();
        Latent::new(x.shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_decreases() {
        let s = NoiseSchedule::linear(50);
        assert_eq!(s.num_steps(), 50);
        assert!((s.beta(1) - NoiseSchedule::BETA_START).abs() < 1e-15);
        assert!((s.beta(50) - NoiseSchedule::BETA_END).abs() < 1e-15);
        for t in 2..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(50) < 0.01);
    }
}
