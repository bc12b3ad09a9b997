//! Noise schedules: all per-timestep constants of the diffusion process.
//!
//! Timesteps are 1-based (`t` in `1..=T`); `alpha_bar(0) == 1` is stored
//! explicitly so the `t = 1` posterior falls out without special cases.

use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};

/// Reverse-step variance used at `t = 1`, where `beta_tilde` is exactly
/// zero and the log-variance interpolation would degenerate.
pub const T1_VARIANCE: Real = 1e-8;

/// Per-timestep diffusion constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<Real>,
    alpha: Vec<Real>,
    /// `alpha_bar[t]` for `t in 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<Real>,
    beta_tilde: Vec<Real>,
    log_beta: Vec<Real>,
    /// `ln(beta_tilde)`; the `t = 1` entry holds `ln(T1_VARIANCE)`.
    log_beta_tilde: Vec<Real>,
}

impl NoiseSchedule {
    /// Build a schedule from raw beta values; derives every cached array.
    pub fn from_betas(beta: Vec<Real>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::param("every beta must lie in (0, 1)"));
        }
        let steps = beta.len();
        let alpha: Vec<Real> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let beta_tilde: Vec<Real> = (1..=steps)
            .map(|t| beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]))
            .collect();
        let log_beta = beta.iter().map(|b| b.ln()).collect();
        let log_beta_tilde = beta_tilde
            .iter()
            .map(|&bt| if bt > 0.0 { bt.ln() } else { T1_VARIANCE.ln() })
            .collect();
        Ok(NoiseSchedule { steps, beta, alpha, alpha_bar, beta_tilde, log_beta, log_beta_tilde })
    }

    /// Linearly interpolated betas, endpoints included.
    pub fn linear(steps: usize, beta_start: Real, beta_end: Real) -> Result<Self> {
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "linear schedule needs 0 < start < end < 1, got start={beta_start} end={beta_end}"
            )));
        }
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        let beta = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as Real / (steps - 1) as Real)
                .collect()
        };
        Self::from_betas(beta)
    }

    /// Linear schedule with the conventional endpoints 1e-4 and 0.02 scaled
    /// by `1000 / steps`.
    pub fn linear_default(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps as Real;
        Self::linear(steps, 1e-4 * scale, 0.02 * scale)
    }

    /// Cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
    /// `f(t) = cos^2(((t/T + offset) / (1 + offset)) * pi/2)`, betas clipped
    /// to at most 0.999. The stored `alpha_bar` is rebuilt from the clipped
    /// betas so the round-trip invariant holds.
    pub fn cosine(steps: usize, offset: Real) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if offset <= 0.0 {
            return Err(Error::param(format!("cosine offset must be positive, got {offset}")));
        }
        let f = |t: Real| {
            let inner = ((t / steps as Real + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2 as Real;
            inner.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for t in 1..=steps {
            let ab = f(t as Real) / f0;
            let b = (1.0 - ab / prev).min(0.999);
            beta.push(b);
            prev = ab;
        }
        Self::from_betas(beta)
    }

    /// Cosine schedule with the conventional 0.008 offset.
    pub fn cosine_default(steps: usize) -> Result<Self> {
        Self::cosine(steps, 0.008)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_t(&self, t: usize) -> usize {
        assert!(1 <= t && t <= self.steps, "timestep {t} out of 1..={}", self.steps);
        t
    }

    pub fn beta(&self, t: usize) -> Real {
        self.beta[self.check_t(t) - 1]
    }

    pub fn alpha(&self, t: usize) -> Real {
        self.alpha[self.check_t(t) - 1]
    }

    /// `alpha_bar(t)` for `t in 0..=T`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Real {
        assert!(t <= self.steps, "timestep {t} out of 0..={}", self.steps);
        self.alpha_bar[t]
    }

    /// Posterior variance; exactly zero at `t = 1`.
    pub fn beta_tilde(&self, t: usize) -> Real {
        self.beta_tilde[self.check_t(t) - 1]
    }

    pub fn log_beta(&self, t: usize) -> Real {
        self.log_beta[self.check_t(t) - 1]
    }

    /// `ln(beta_tilde(t))`; at `t = 1` this is `ln(T1_VARIANCE)`.
    pub fn log_beta_tilde(&self, t: usize) -> Real {
        self.log_beta_tilde[self.check_t(t) - 1]
    }

    pub fn betas(&self) -> &[Real] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[Real] {
        &self.alpha_bar
    }

    /// Validates a user-supplied timestep.
    pub fn validate_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::param(format!("timestep {t} out of 1..={}", self.steps)));
        }
        Ok(())
    }
}
