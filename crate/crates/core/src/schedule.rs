//! DDPM noise schedule: forward noising and the strided ancestral reverse step.

use serde::{Deserialize, Serialize};

use crate::codec::LatentVideo;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta schedule with cumulative products `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = config;
        if steps < 2 {
            return Err(invalid("schedule needs at least two steps"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "betas must satisfy 0 < start < end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alphas_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Ok(Self {
            config,
            betas,
            alphas_bar,
        })
    }

    pub fn linear_default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, x0: &LatentVideo, t: usize, eps: &LatentVideo) -> Result<LatentVideo> {
        if x0.dims() != eps.dims() {
            return Err(invalid(format!(
                "noise shape {:?} does not match latent {:?}",
                eps.dims(),
                x0.dims()
            )));
        }
        let (a, s) = self.coefficients(t)?;
        let data = x0.data.mapv(|v| (a * v as f64) as f32)
            + eps.data.mapv(|v| (s * v as f64) as f32);
        Ok(LatentVideo {
            data,
            scale_factor: x0.scale_factor,
        })
    }

    /// `n` timesteps evenly spread from `steps−1` down to 0.
    pub fn strided(&self, n: usize) -> Vec<usize> {
        let last = self.steps() - 1;
        let n = n.clamp(1, self.steps());
        if n == 1 {
            return vec![last];
        }
        let mut ts: Vec<usize> = (0..n)
            .map(|k| ((last as f64) * (n - 1 - k) as f64 / (n - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts
    }

    /// Coefficients of one reverse step from `t` to `prev` (`None` = clean data).
    pub fn reverse_step(&self, t: usize, prev: Option<usize>) -> Result<ReverseStep> {
        let ab_t = self.alpha_bar(t)?;
        let ab_prev = match prev {
            Some(p) => self.alpha_bar(p)?,
            None => 1.0,
        };
        let beta = 1.0 - ab_t / ab_prev;
        let alpha = 1.0 - beta;
        Ok(ReverseStep {
            ab_t,
            ab_prev,
            beta,
            alpha,
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab_t),
            coef_xt: alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t),
            variance: ((1.0 - ab_prev) / (1.0 - ab_t) * beta).max(0.0),
        })
    }
}

/// Closed-form quantities of `q(x_prev | x_t, x0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseStep {
    pub ab_t: f64,
    pub ab_prev: f64,
    pub beta: f64,
    pub alpha: f64,
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

impl ReverseStep {
    pub fn predict_x0(&self, x_t: f64, eps: f64) -> f64 {
        (x_t - (1.0 - self.ab_t).sqrt() * eps) / self.ab_t.sqrt()
    }

    /// Posterior mean from a clean-data estimate.
    pub fn mean_from_x0(&self, x0: f64, x_t: f64) -> f64 {
        self.coef_x0 * x0 + self.coef_xt * x_t
    }

    /// Posterior mean written in terms of the predicted noise.
    pub fn mean_from_eps(&self, x_t: f64, eps: f64) -> f64 {
        (x_t - self.beta / (1.0 - self.ab_t).sqrt() * eps) / self.alpha.sqrt()
    }
}
