//! Discrete variance schedule for the forward corruption process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters from which a [`NoiseSchedule`] is built; stored in checkpoint
/// headers so a model is always sampled with the schedule it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_min, self.beta_max)
    }
}

/// Discretized variance schedule: per-step variances `beta` and the cumulative
/// products `alpha_bar[k] = prod_{i<=k} (1 - beta[i])`.
///
/// Diffusion time is continuous, `t in [0, 1]` with `t = 0` clean and `t = 1`
/// maximal noise; `t` maps to the discrete step `floor(t * (N - 1))`, clamped.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_min` to `beta_max` over `num_steps`.
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas = (0..num_steps)
            .map(|k| {
                if num_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * k as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Default desk-scale schedule: N = 100, beta linear in [1e-4, 0.2].
    pub fn default_linear() -> Self {
        ScheduleConfig::default().build().expect("default schedule is valid")
    }

    /// Builds a schedule from explicit per-step variances.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        for (k, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!(
                    "beta[{k}] = {b} outside (0, 1)"
                )));
            }
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        for (k, &a) in alpha_bar.iter().enumerate() {
            if a <= 0.0 {
                return Err(Error::Config(format!("alpha_bar[{k}] = {a} not positive")));
            }
            if k > 0 && a >= alpha_bar[k - 1] {
                return Err(Error::Config(format!(
                    "alpha_bar not strictly decreasing at step {k}"
                )));
            }
        }
        // Posterior variance of the reverse step; zero at step 0 where no
        // fresh noise is added.
        let mut posterior_var = Vec::with_capacity(beta.len());
        posterior_var.push(0.0);
        for k in 1..beta.len() {
            posterior_var.push(beta[k] * (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]));
        }
        Ok(NoiseSchedule {
            beta,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, step: usize) -> f64 {
        self.beta[step]
    }

    pub fn alpha(&self, step: usize) -> f64 {
        1.0 - self.beta[step]
    }

    pub fn alpha_bar(&self, step: usize) -> f64 {
        self.alpha_bar[step]
    }

    pub fn posterior_variance(&self, step: usize) -> f64 {
        self.posterior_var[step]
    }

    /// Maps continuous diffusion time to a discrete step index.
    pub fn step_for_time(&self, t: f64) -> Result<usize> {
        check_time(t)?;
        let n = self.num_steps();
        let k = (t * (n - 1) as f64).floor() as usize;
        Ok(k.min(n - 1))
    }

    /// Continuous time of a discrete step: `k / (N - 1)`.
    pub fn time_for_step(&self, step: usize) -> f64 {
        let n = self.num_steps();
        if n <= 1 {
            0.0
        } else {
            step as f64 / (n - 1) as f64
        }
    }

    /// `alpha_bar` at continuous time `t`.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_bar[self.step_for_time(t)?])
    }
}

/// Validates `t in [0, 1]`.
pub fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "diffusion time {t} outside [0, 1]"
        )));
    }
    Ok(())
}
