//! Closed-form epsilon model for 1-D Gaussian data.
//!
//! For data `x0 ~ N(m, s^2)` the marginal at step t is Gaussian, so the
//! posterior-expected noise and the exact reverse-step variance are both
//! available in closed form. This makes the model an exact reference point
//! for the ancestral sampler.

use super::EpsilonModel;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::{Real, Result};

#[derive(Clone, Debug)]
pub struct AnalyticGaussianScore {
    pub data_mean: Real,
    pub data_var: Real,
    sched: NoiseSchedule,
}

impl AnalyticGaussianScore {
    pub fn new(data_mean: Real, data_var: Real, sched: NoiseSchedule) -> Self {
        assert!(data_var > 0.0);
        AnalyticGaussianScore { data_mean, data_var, sched }
    }

    /// Posterior-expected noise `E[eps | x_t]`:
    /// `sqrt(1-ab) * (x - sqrt(ab) m) / (ab s^2 + 1 - ab)`.
    pub fn expected_eps(&self, x: Real, t: usize) -> Real {
        let ab = self.sched.alpha_bar(t);
        (1.0 - ab).sqrt() * (x - ab.sqrt() * self.data_mean) / (ab * self.data_var + 1.0 - ab)
    }

    /// Exact reverse-step variance `Var(x_{t-1} | x_t)` for Gaussian data,
    /// via joint-Gaussian conditioning.
    pub fn exact_reverse_variance(&self, t: usize) -> Real {
        let ab_prev = self.sched.alpha_bar(t - 1);
        let ab = self.sched.alpha_bar(t);
        let alpha = self.sched.alpha(t);
        let v1 = ab_prev * self.data_var + 1.0 - ab_prev;
        let v2 = ab * self.data_var + 1.0 - ab;
        let cov = alpha.sqrt() * v1;
        v1 - cov * cov / v2
    }

    /// The `v` that makes the variance interpolation reproduce the exact
    /// reverse variance; lies in [0, 1] because the exact value is always
    /// bracketed by `beta_tilde` and `beta`.
    pub fn exact_v(&self, t: usize) -> Real {
        if t == 1 {
            return 0.0;
        }
        let rho2 = self.exact_reverse_variance(t);
        let (lb, lbt) = (self.sched.log_beta(t), self.sched.log_beta_tilde(t));
        ((rho2.ln() - lbt) / (lb - lbt)).clamp(0.0, 1.0)
    }
}

impl EpsilonModel for AnalyticGaussianScore {
    fn sample_shape(&self) -> Vec<usize> {
        vec![1]
    }

    fn cond_width(&self) -> usize {
        0
    }

    fn predict(&self, x_t: &Tensor, t: usize, _cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let eps = x_t.map(|x| self.expected_eps(x, t));
        let v = Tensor::full(x_t.shape().to_vec(), self.exact_v(t));
        Ok((eps, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::sigma_from_v;

    #[test]
    fn exact_variance_is_bracketed() {
        let s = NoiseSchedule::cosine_default(50).unwrap();
        let m = AnalyticGaussianScore::new(1.0, 0.64, s.clone());
        for t in 2..=50 {
            let rho2 = m.exact_reverse_variance(t);
            assert!(
                s.beta_tilde(t) <= rho2 + 1e-15 && rho2 <= s.beta(t) + 1e-15,
                "t={t}: {} vs [{}, {}]",
                rho2,
                s.beta_tilde(t),
                s.beta(t)
            );
            // interpolation with exact_v reproduces it
            let v = Tensor::scalar(m.exact_v(t));
            let sig = sigma_from_v(&v, t, &s).unwrap().item();
            assert!((sig - rho2).abs() / rho2 < 1e-10);
        }
    }

    #[test]
    fn unit_variance_data_pins_endpoints() {
        // with s^2 = 1 the reverse variance equals beta exactly
        let s = NoiseSchedule::cosine_default(30).unwrap();
        let m = AnalyticGaussianScore::new(0.0, 1.0, s.clone());
        for t in 2..=30 {
            assert!((m.exact_reverse_variance(t) - s.beta(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn expected_eps_recovers_posterior_mean_of_x0() {
        // predict_x0 with the expected eps equals E[x0 | x_t]
        let s = NoiseSchedule::cosine_default(20).unwrap();
        let m = AnalyticGaussianScore::new(0.7, 0.25, s.clone());
        let t = 9;
        let ab = s.alpha_bar(t);
        for x in [-1.0, 0.3, 2.4] {
            let eps = m.expected_eps(x, t);
            let x0_hat = (1.0 / ab).sqrt() * x - (1.0 / ab - 1.0).sqrt() * eps;
            // joint-Gaussian conditioning: E[x0 | x_t]
            let v2 = ab * 0.25 + 1.0 - ab;
            let expect = 0.7 + ab.sqrt() * 0.25 / v2 * (x - ab.sqrt() * 0.7);
            assert!((x0_hat - expect).abs() < 1e-12);
        }
    }
}
