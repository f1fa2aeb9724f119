use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Variance-preserving schedule. Index 0 is the clean signal (`ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            train_steps: t,
            beta_start,
            beta_end,
        } = *cfg;
        if t == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1"
            )));
        }
        let mut beta = Vec::with_capacity(t + 1);
        beta.push(0.0);
        for i in 1..=t {
            let frac = if t == 1 { 0.0 } else { (i - 1) as f64 / (t - 1) as f64 };
            beta.push(beta_start + (beta_end - beta_start) * frac);
        }
        Self::from_betas(beta)
    }

    /// `beta[0]` must be zero; `beta[1..]` are the per-step variances.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 || beta[0] != 0.0 {
            return Err(Error::InvalidConfig("betas must start with 0 and have a step".into()));
        }
        if beta[1..].iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidConfig("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        alpha_bar.push(acc);
        for b in &beta[1..] {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    /// Number of training steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Evenly spaced DDIM indices `round(k·T/S)` for `k = S, …, 0`, strictly decreasing.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::InvalidConfig(format!(
                "DDIM step count {steps} must lie in [1, {t}]"
            )));
        }
        Ok((0..=steps)
            .rev()
            .map(|k| ((k * t) as f64 / steps as f64).round() as usize)
            .collect())
    }
}
