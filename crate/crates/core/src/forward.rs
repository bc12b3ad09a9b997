//! Closed-form Gaussian diffusion quantities: the marginal reparametrization,
//! the tractable posterior, and the conversions between predicted noise, the
//! reverse mean and the clean-image estimate.
//!
//! Everything here is a pure function over plain tensors and an immutable
//! schedule; nothing records gradients.

use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::{Real, Result};

/// A Gaussian as an elementwise (mean, variance) pair. The variance is
/// stored per element even when isotropic so the learned-variance path can
/// reuse the same type.
#[derive(Clone, Debug)]
pub struct GaussianMoments {
    pub mean: Tensor,
    pub variance: Tensor,
}

/// Sample `x_t` from the closed-form marginal:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.validate_t(t)?;
    let ab = sched.alpha_bar(t);
    let (c0, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "q_sample", |x, e| c0 * x + ce * e)
}

/// Moments of the tractable posterior `q(x_{t-1} | x_t, x0)`.
pub fn posterior(x0: &Tensor, xt: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<GaussianMoments> {
    sched.validate_t(t)?;
    let (ab_prev, ab) = (sched.alpha_bar(t - 1), sched.alpha_bar(t));
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let coef_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = x0.zip_map(xt, "posterior", |a, b| coef_x0 * a + coef_xt * b)?;
    let variance = Tensor::full(mean.shape().to_vec(), sched.beta_tilde(t));
    Ok(GaussianMoments { mean, variance })
}

/// Reverse-process mean from predicted noise:
/// `mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn mean_from_eps(xt: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.validate_t(t)?;
    let c_eps = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    xt.zip_map(eps_hat, "mean_from_eps", |x, e| inv_sqrt_alpha * (x - c_eps * e))
}

/// Clean-image estimate from predicted noise:
/// `x0_hat = sqrt(1/alpha_bar_t) * x_t - sqrt(1/alpha_bar_t - 1) * eps_hat`.
pub fn predict_x0(xt: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.validate_t(t)?;
    let ab = sched.alpha_bar(t);
    let (c_xt, c_eps) = ((1.0 / ab).sqrt(), (1.0 / ab - 1.0).sqrt());
    xt.zip_map(eps_hat, "predict_x0", |x, e| c_xt * x - c_eps * e)
}

/// Inverse of [`predict_x0`]: the noise consistent with a given clean-image
/// estimate, `eps = (sqrt(1/ab) * x_t - x0_hat) / sqrt(1/ab - 1)`.
pub fn eps_from_x0(xt: &Tensor, t: usize, x0_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.validate_t(t)?;
    let ab = sched.alpha_bar(t);
    let (c_xt, c_eps) = ((1.0 / ab).sqrt(), (1.0 / ab - 1.0).sqrt());
    xt.zip_map(x0_hat, "eps_from_x0", |x, x0| (c_xt * x - x0) / c_eps)
}

/// Noise value implied by `x0` and `x_t` (inverse of [`q_sample`] in `eps`).
pub fn eps_from_q_sample(x0: &Tensor, xt: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.validate_t(t)?;
    let ab = sched.alpha_bar(t);
    let (c0, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    xt.zip_map(x0, "eps_from_q_sample", |x, x0| (x - c0 * x0) / ce)
}

/// Diagnostic `L_T` term: KL between `q(x_T | x0)` and the standard normal,
/// in nats per dimension (constant in the model parameters).
pub fn prior_kl_per_dim(x0: &Tensor, sched: &NoiseSchedule) -> Real {
    let t = sched.steps();
    let ab = sched.alpha_bar(t);
    let var = 1.0 - ab;
    // KL(N(m, var) || N(0,1)) per element, averaged over elements
    let per: Real = x0
        .data()
        .iter()
        .map(|&x| {
            let m = ab.sqrt() * x;
            0.5 * (var + m * m - 1.0 - var.ln())
        })
        .sum();
    per / x0.numel() as Real
}
