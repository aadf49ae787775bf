//! Scalar diffusion noise schedules.
//!
//! Steps are 1-based: step `i ∈ [1, N]` uses `betas[i-1]`, and step 0 is clean
//! data with `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Record a schedule is rebuilt from; stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            num_train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[i]` for `i ∈ [0, N]`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let n = config.num_train_steps;
        if n == 0 {
            return Err(Error::Parameter("num_train_steps must be positive".into()));
        }
        let betas: Vec<f64> = match config.kind {
            ScheduleKind::Linear => {
                if !(config.beta_start > 0.0
                    && config.beta_start <= config.beta_end
                    && config.beta_end < 1.0)
                {
                    return Err(Error::Parameter(format!(
                        "need 0 < beta_start <= beta_end < 1, got {} and {}",
                        config.beta_start, config.beta_end
                    )));
                }
                if n == 1 {
                    vec![config.beta_start]
                } else {
                    (0..n)
                        .map(|i| {
                            config.beta_start
                                + (config.beta_end - config.beta_start) * i as f64 / (n - 1) as f64
                        })
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (0..n)
                    .map(|i| {
                        let t1 = i as f64 / n as f64;
                        let t2 = (i + 1) as f64 / n as f64;
                        (1.0 - f(t2) / f(t1)).min(0.999)
                    })
                    .collect()
            }
        };
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Parameter("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            config,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn linear(num_train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleConfig {
            kind: ScheduleKind::Linear,
            num_train_steps,
            beta_start,
            beta_end,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn num_train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, step: usize) -> Result<()> {
        if step > self.num_train_steps() {
            return Err(Error::Parameter(format!(
                "step {step} outside [0, {}]",
                self.num_train_steps()
            )));
        }
        Ok(())
    }

    /// β at step `i ≥ 1`.
    pub fn beta(&self, step: usize) -> f64 {
        self.betas[step - 1]
    }

    pub fn alpha(&self, step: usize) -> f64 {
        self.alphas[step - 1]
    }

    pub fn alpha_bar(&self, step: usize) -> f64 {
        self.alpha_bars[step]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of q(x^(i−1) | x^(i), x^(0)); zero at step 1.
    pub fn posterior_variance(&self, step: usize) -> f64 {
        self.beta(step) * (1.0 - self.alpha_bar(step - 1)) / (1.0 - self.alpha_bar(step))
    }

    /// Log posterior variance with the step-1 value replaced by step 2's so the
    /// log stays finite.
    pub fn posterior_log_variance_clipped(&self, step: usize) -> f64 {
        if step == 1 && self.num_train_steps() > 1 {
            self.posterior_variance(2).ln()
        } else if step == 1 {
            self.beta(1).ln()
        } else {
            self.posterior_variance(step).ln()
        }
    }

    /// Coefficients `(c0, ci)` of the posterior mean `c0·x0 + ci·x_i`.
    pub fn posterior_mean_coefs(&self, step: usize) -> (f64, f64) {
        let ab = self.alpha_bar(step);
        let ab_prev = self.alpha_bar(step - 1);
        (
            self.beta(step) * ab_prev.sqrt() / (1.0 - ab),
            (1.0 - ab_prev) * self.alpha(step).sqrt() / (1.0 - ab),
        )
    }
}

/// Evenly spaced, strictly decreasing sampling steps `⌊k·N/T⌋` for `k = T..1`.
pub fn make_sampling_steps(num_steps: usize, num_train_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > num_train_steps {
        return Err(Error::Parameter(format!(
            "need 1 <= T <= N, got T={num_steps}, N={num_train_steps}"
        )));
    }
    Ok((1..=num_steps)
        .rev()
        .map(|k| k * num_train_steps / num_steps)
        .collect())
}

/// `⌊λT⌋`, tolerant of floating-point products that land a hair under an integer.
pub fn guided_step_count(lambda: f64, num_steps: usize) -> usize {
    let raw = lambda * num_steps as f64;
    ((raw + 1e-9).floor() as usize).min(num_steps)
}
