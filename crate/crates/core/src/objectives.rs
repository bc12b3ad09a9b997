//! Training losses: the noise-MSE objective, the variational-bound terms
//! with the learned-variance interpolation, and their weighted hybrid with
//! stop-gradient on the mean path.
//!
//! Reduction convention: VLB terms are summed over data dims and averaged
//! over the batch (dim 0), reported in nats.

use crate::forward::{mean_from_eps, posterior, q_sample};
use crate::schedule::{NoiseSchedule, T1_VARIANCE};
use crate::tensor::{Graph, Node, Tensor};
use crate::{Error, Real, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: Real) -> Real {
    0.5 * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2) as Real)
}

fn batch_of(t: &Tensor) -> usize {
    if t.ndim() == 0 {
        1
    } else {
        t.shape()[0]
    }
}

/// Closed-form KL between elementwise Gaussians, summed over data dims and
/// averaged over the batch (dim 0). All four tensors share one shape.
pub fn gaussian_kl(mean1: &Tensor, var1: &Tensor, mean2: &Tensor, var2: &Tensor) -> Result<Real> {
    for (name, v) in [("var1", var1), ("var2", var2)] {
        if v.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::param(format!("{name} must be strictly positive")));
        }
    }
    if mean1.shape() != var1.shape() || mean1.shape() != mean2.shape() || mean1.shape() != var2.shape() {
        return Err(Error::shape("gaussian_kl", "all moment tensors must share one shape"));
    }
    let mut total = 0.0;
    for i in 0..mean1.numel() {
        let (m1, v1, m2, v2) =
            (mean1.data()[i], var1.data()[i], mean2.data()[i], var2.data()[i]);
        let d = m1 - m2;
        total += 0.5 * ((v2 / v1).ln() + (v1 + d * d) / v2 - 1.0);
    }
    Ok(total / batch_of(mean1) as Real)
}

/// Log-likelihood of pixel data quantized to the 256-level grid in [-1, 1]
/// under an elementwise Gaussian; bins have width 1/127.5 and the edge bins
/// are open-ended. Summed over data dims, averaged over the batch.
pub fn discretized_gaussian_loglik(x0: &Tensor, mean: &Tensor, var: &Tensor) -> Result<Real> {
    if x0.shape() != mean.shape() || x0.shape() != var.shape() {
        return Err(Error::shape("discretized_loglik", "x0/mean/var must share one shape"));
    }
    if var.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::param("variance must be strictly positive"));
    }
    let mut total = 0.0;
    for i in 0..x0.numel() {
        total += log_bin_mass(x0.data()[i], mean.data()[i], var.data()[i]);
    }
    Ok(total / batch_of(x0) as Real)
}

/// Log of the Gaussian mass falling in the bin of the quantized value `x`.
fn log_bin_mass(x: Real, mean: Real, var: Real) -> Real {
    const HALF_BIN: Real = 1.0 / 255.0;
    const FLOOR: Real = 1e-12;
    let std = var.sqrt();
    let upper = if x > 1.0 - HALF_BIN { 1.0 } else { normal_cdf((x + HALF_BIN - mean) / std) };
    let lower = if x < -1.0 + HALF_BIN { 0.0 } else { normal_cdf((x - HALF_BIN - mean) / std) };
    (upper - lower).max(FLOOR).ln()
}

/// Learned-variance interpolation
/// `Sigma = exp(v * ln(beta_t) + (1 - v) * ln(beta_tilde_t))` elementwise.
/// At `t = 1` the interpolation is degenerate (`beta_tilde_1 = 0`) and the
/// variance is fixed to [`T1_VARIANCE`].
pub fn sigma_from_v(v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.validate_t(t)?;
    if t == 1 {
        return Ok(Tensor::full(v.shape().to_vec(), T1_VARIANCE));
    }
    let (lb, lbt) = (sched.log_beta(t), sched.log_beta_tilde(t));
    Ok(v.map(|vv| (vv * lb + (1.0 - vv) * lbt).exp()))
}

/// Graph version of [`sigma_from_v`] returning the log-variance node.
pub fn log_sigma_from_v_node(g: &Graph, v: Node, t: usize, sched: &NoiseSchedule) -> Result<Node> {
    sched.validate_t(t)?;
    if t == 1 {
        let shape = g.shape_of(v);
        return Ok(g.constant(Tensor::full(shape, T1_VARIANCE.ln())));
    }
    let (lb, lbt) = (sched.log_beta(t), sched.log_beta_tilde(t));
    g.affine(v, lb - lbt, lbt)
}

/// The pieces of one hybrid-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct HybridLossParts {
    pub l_simple: Real,
    pub l_vlb_term: Real,
    pub lambda: Real,
    pub total: Real,
}

/// Conditional forward pass of a noise-prediction model, producing the
/// `(eps, v)` heads as graph nodes. Conditioning is already bound.
pub trait EpsilonForward {
    fn forward(&mut self, g: &Graph, x_t: &Tensor) -> Result<(Node, Node)>;
}

impl<F> EpsilonForward for F
where
    F: FnMut(&Graph, &Tensor) -> Result<(Node, Node)>,
{
    fn forward(&mut self, g: &Graph, x_t: &Tensor) -> Result<(Node, Node)> {
        self(g, x_t)
    }
}

/// Noise-prediction MSE: forms `x_t` internally and compares the model's
/// eps head against the true noise, averaged over batch and elements.
pub fn l_simple(
    g: &Graph,
    model: &mut dyn EpsilonForward,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Node> {
    let xt = q_sample(x0, t, eps, sched)?;
    let (eps_hat, _v) = model.forward(g, &xt)?;
    let target = g.constant(eps.clone());
    g.mse(eps_hat, target)
}

/// Hybrid objective: `L_simple + lambda * L_t`, where `L_t` is the VLB term
/// for the sampled timestep (`KL(q || p)` for `t >= 2`, the discretized
/// log-likelihood for `t = 1`). The mean path inside the VLB term is
/// stop-gradded so only the variance head learns from it.
pub fn l_hybrid(
    g: &Graph,
    model: &mut dyn EpsilonForward,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
    lambda: Real,
) -> Result<(HybridLossParts, Node)> {
    let xt = q_sample(x0, t, eps, sched)?;
    let (eps_hat, v) = model.forward(g, &xt)?;
    let target = g.constant(eps.clone());
    let l_simple_node = g.mse(eps_hat, target)?;

    // Mean path: detached eps keeps the VLB gradient away from the eps head.
    let eps_detached = g.value(eps_hat);
    let p_mean = mean_from_eps(&xt, t, &eps_detached, sched)?;
    let batch = batch_of(x0) as Real;

    let l_vlb_node = if t >= 2 {
        let q = posterior(x0, &xt, t, sched)?;
        let log_var = log_sigma_from_v_node(g, v, t, sched)?;
        vlb_kl_node(g, &q.mean, sched.beta_tilde(t), &p_mean, log_var, batch)?
    } else {
        let var = Tensor::full(p_mean.shape().to_vec(), T1_VARIANCE);
        let l0 = -discretized_gaussian_loglik(x0, &p_mean, &var)?;
        g.constant(Tensor::scalar(l0))
    };

    let weighted = g.scale(l_vlb_node, lambda)?;
    let total = g.add(l_simple_node, weighted)?;
    let parts = HybridLossParts {
        l_simple: g.value(l_simple_node).item(),
        l_vlb_term: g.value(l_vlb_node).item(),
        lambda,
        total: g.value(total).item(),
    };
    Ok((parts, total))
}

/// `KL(N(q_mean, q_var) || N(p_mean, exp(log_var)))` with the q side and
/// `p_mean` constant; summed over data dims, averaged over the batch.
fn vlb_kl_node(
    g: &Graph,
    q_mean: &Tensor,
    q_var: Real,
    p_mean: &Tensor,
    log_var: Node,
    batch: Real,
) -> Result<Node> {
    // 0.5 * (log_var - ln(q_var) + (q_var + diff^2) * exp(-log_var) - 1)
    let diff_sq = q_mean.zip_map(p_mean, "vlb_kl", |a, b| (a - b) * (a - b))?;
    let coeff = g.constant(diff_sq.map(|d| q_var + d));
    let neg_log_var = g.neg(log_var)?;
    let inv_var = g.exp(neg_log_var)?;
    let ratio = g.mul(coeff, inv_var)?;
    let shifted = g.add_scalar(log_var, -q_var.ln() - 1.0)?;
    let per_elem = g.add(shifted, ratio)?;
    let half = g.scale(per_elem, 0.5)?;
    let summed = g.sum_all(half)?;
    g.scale(summed, 1.0 / batch)
}

pub use crate::forward::prior_kl_per_dim;
