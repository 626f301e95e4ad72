use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance schedule `β_1..β_N` with cumulative products `ᾱ_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced, strictly increasing betas.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) && steps > 1 {
            return Err(Error::Domain(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Arbitrary betas in `[0, 1)`, non-decreasing. Zero betas are allowed so
    /// that noiseless schedules can be built for testing.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Domain("empty schedule".into()));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Domain("betas must lie in [0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("betas must be non-decreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `β_n`, `1 ≤ n ≤ N`.
    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    /// `ᾱ_n` with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bars[n]
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::Domain(format!("step {n} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Coefficients `(c_x0, c_xn)` of the posterior mean of `q(X_{n-1} | X_n, X_0)`.
    pub fn posterior_mean_coefs(&self, n: usize) -> (f64, f64) {
        let ab = self.alpha_bar(n);
        let ab_prev = self.alpha_bar(n - 1);
        let beta = self.beta(n);
        let denom = 1.0 - ab;
        if denom <= 0.0 {
            return (1.0, 0.0);
        }
        (
            ab_prev.sqrt() * beta / denom,
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / denom,
        )
    }

    /// Fixed posterior variance `β̃_n = (1-ᾱ_{n-1}) / (1-ᾱ_n) · β_n`.
    pub fn posterior_variance(&self, n: usize) -> f64 {
        let denom = 1.0 - self.alpha_bar(n);
        if denom <= 0.0 {
            return 0.0;
        }
        (1.0 - self.alpha_bar(n - 1)) / denom * self.beta(n)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// `√ᾱ_n X_0 + √(1-ᾱ_n) ε` for a given `ε`.
pub fn forward_noise_with(x0: &[f64], n: usize, schedule: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(n)?;
    if noise.len() != x0.len() {
        return Err(Error::Contract("noise width differs from X_0".into()));
    }
    let ab = schedule.alpha_bar(n);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// Draw from the closed-form marginal `q(X_n | X_0)`.
pub fn forward_noise<R: Rng + ?Sized>(x0: &[f64], n: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Vec<f64>> {
    schedule.check_step(n)?;
    let noise = standard_normal(x0.len(), rng);
    forward_noise_with(x0, n, schedule, &noise)
}
