//! DDPM ancestral sampling with classifier-free guidance, the classifier
//! hook, image guidance and thresholding.
//!
//! Chains are seeded independently (one ChaCha stream per chain index), so a
//! batched run draws exactly the same noise per chain as the equivalent
//! single-chain runs, and a fixed seed reproduces output bytes exactly.

use rand_chacha::ChaCha20Rng;

use crate::forward::{eps_from_x0, mean_from_eps, predict_x0};
use crate::guidance::{
    classifier_free, classifier_guided_mean, image_guide, static_threshold, dynamic_threshold,
    GuidanceConfig, Threshold, ThresholdTarget,
};
use crate::models::EpsilonModel;
use crate::objectives::sigma_from_v;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::{rng_for_chain, Error, Real, Result};

/// One sampling job.
pub struct SampleRequest {
    pub count: usize,
    /// Conditioning embedding shared by every chain; `None` samples
    /// unconditionally.
    pub cond: Option<Tensor>,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Record latents at [`trace_steps`](Self::trace_steps).
    pub trace: bool,
    /// Defaults to multiples of `T/10` (plus the final output at t = 0).
    pub trace_steps: Option<Vec<usize>>,
}

impl SampleRequest {
    pub fn new(count: usize, seed: u64) -> Self {
        SampleRequest {
            count,
            cond: None,
            guidance: GuidanceConfig::none(),
            seed,
            trace: false,
            trace_steps: None,
        }
    }

    pub fn with_cond(mut self, cond: Tensor) -> Self {
        self.cond = Some(cond);
        self
    }

    pub fn with_guidance(mut self, g: GuidanceConfig) -> Self {
        self.guidance = g;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = true;
        self
    }
}

pub struct SampleOutput {
    /// `[count, ..sample_shape]`
    pub samples: Tensor,
    /// `(t, latent)` pairs, ordered from t = T down; empty unless traced.
    pub trace: Vec<(usize, Tensor)>,
}

fn default_trace_steps(steps: usize) -> Vec<usize> {
    let stride = (steps / 10).max(1);
    (1..=steps).filter(|t| t % stride == 0).collect()
}

/// Draw a `[count, ..shape]` standard-normal tensor, one chain stream per row.
fn draw_per_chain(rngs: &mut [ChaCha20Rng], shape: &[usize]) -> Tensor {
    let per: usize = shape.iter().product();
    let mut full = vec![rngs.len()];
    full.extend_from_slice(shape);
    let mut out = Tensor::zeros(full);
    for (i, rng) in rngs.iter_mut().enumerate() {
        let row = Tensor::randn(shape.to_vec(), rng);
        out.data_mut()[i * per..(i + 1) * per].copy_from_slice(row.data());
    }
    out
}

fn stat_summary(x: &Tensor) -> String {
    let (mut lo, mut hi, mut sum) = (Real::INFINITY, Real::NEG_INFINITY, 0.0);
    let mut non_finite = 0usize;
    for &v in x.data() {
        if !v.is_finite() {
            non_finite += 1;
            continue;
        }
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    format!(
        "min={lo:.4} max={hi:.4} mean={:.4} non_finite={non_finite}",
        sum / (x.numel() - non_finite).max(1) as Real
    )
}

/// Broadcast one per-example tensor over the batch dimension.
fn broadcast_rows(row: &Tensor, count: usize) -> Tensor {
    let per = row.numel();
    let mut shape = vec![count];
    shape.extend_from_slice(row.shape());
    Tensor::from_fn(shape, |i| row.data()[i % per])
}

/// Ancestral sampling loop. Starts from `x_T ~ N(0, I)` and runs the learned
/// reverse kernel down to `x_0`, with one conditional forward pass per step
/// (plus one unconditional pass, batched together, when classifier-free
/// guidance is active).
pub fn ddpm_sample(
    model: &dyn EpsilonModel,
    sched: &NoiseSchedule,
    req: &SampleRequest,
) -> Result<SampleOutput> {
    if req.count == 0 {
        return Err(Error::param("sample count must be at least 1"));
    }
    let shape = model.sample_shape();
    let per: usize = shape.iter().product();
    if let Some(c) = &req.cond {
        if c.shape() != [model.cond_width()] {
            return Err(Error::param(format!(
                "conditioning width {} does not match the model's {}",
                c.numel(),
                model.cond_width()
            )));
        }
    }
    if let Some(ig) = &req.guidance.image_guide {
        if ig.base.shape() != shape.as_slice() {
            return Err(Error::shape("image_guide", "base image shape must match sample shape"));
        }
    }

    let steps = sched.steps();
    let trace_at: Vec<usize> = if req.trace {
        req.trace_steps.clone().unwrap_or_else(|| default_trace_steps(steps))
    } else {
        Vec::new()
    };

    let mut rngs: Vec<ChaCha20Rng> =
        (0..req.count).map(|i| rng_for_chain(req.seed, i as u64)).collect();
    let mut x = draw_per_chain(&mut rngs, &shape);
    let mut trace: Vec<(usize, Tensor)> = Vec::new();

    let s = req.guidance.cfg_scale;
    let use_cfg = s != 1.0 && req.cond.is_some();
    let cond_rows = req.cond.as_ref().map(|c| broadcast_rows(c, req.count));

    for t in (1..=steps).rev() {
        if trace_at.contains(&t) {
            trace.push((t, x.clone()));
        }

        let (eps, v) = if use_cfg {
            // conditional and unconditional passes share x_t and t
            let mut doubled_shape = vec![2 * req.count];
            doubled_shape.extend_from_slice(&shape);
            let mut doubled = Tensor::zeros(doubled_shape);
            doubled.data_mut()[..req.count * per].copy_from_slice(x.data());
            doubled.data_mut()[req.count * per..].copy_from_slice(x.data());
            let cond_rows = cond_rows.as_ref().unwrap();
            let mut cshape = vec![2 * req.count];
            cshape.extend_from_slice(&cond_rows.shape()[1..]);
            let mut cond2 = Tensor::zeros(cshape);
            cond2.data_mut()[..cond_rows.numel()].copy_from_slice(cond_rows.data());
            let (eps2, v2) = model.predict(&doubled, t, Some(&cond2))?;
            let mut eshape = vec![req.count];
            eshape.extend_from_slice(&shape);
            let eps_c = Tensor::new(eshape.clone(), eps2.data()[..req.count * per].to_vec())?;
            let eps_u = Tensor::new(eshape.clone(), eps2.data()[req.count * per..].to_vec())?;
            // variance comes from the conditional pass
            let v_c = Tensor::new(eshape, v2.data()[..req.count * per].to_vec())?;
            (classifier_free(&eps_c, &eps_u, s)?, v_c)
        } else {
            model.predict(&x, t, cond_rows.as_ref())?
        };

        // thresholding, by default on the clean-image estimate
        let eps_used = match (req.guidance.threshold, req.guidance.threshold_target) {
            (Threshold::None, _) => eps,
            (thr, ThresholdTarget::X0Hat) => {
                let x0_hat = predict_x0(&x, t, &eps, sched)?;
                let x0_thr = match thr {
                    Threshold::Static => static_threshold(&x0_hat),
                    Threshold::Dynamic { percentile } => dynamic_threshold(&x0_hat, percentile)?,
                    Threshold::None => unreachable!(),
                };
                eps_from_x0(&x, t, &x0_thr, sched)?
            }
            (thr, ThresholdTarget::Epsilon) => match thr {
                Threshold::Static => static_threshold(&eps),
                Threshold::Dynamic { percentile } => dynamic_threshold(&eps, percentile)?,
                Threshold::None => unreachable!(),
            },
        };

        let mut mu = mean_from_eps(&x, t, &eps_used, sched)?;
        let var = sigma_from_v(&v, t, sched)?;

        if let Some(cg) = &req.guidance.classifier {
            let grad = (cg.grad_log_p)(&x, t)?;
            mu = classifier_guided_mean(&mu, &var, &grad, cg.scale)?;
        }

        x = if t > 1 {
            let z = draw_per_chain(&mut rngs, &shape);
            let mut next = mu;
            for i in 0..next.numel() {
                next.data_mut()[i] += var.data()[i].sqrt() * z.data()[i];
            }
            next
        } else {
            // z = 0 on the final step
            mu
        };

        if let Some(ig) = &req.guidance.image_guide {
            let base = broadcast_rows(&ig.base, req.count);
            x = image_guide(&x, &base, ig.scale, t, steps, ig.decay)?;
        }

        if !x.all_finite() {
            return Err(Error::NonFinite {
                op: "ddpm_sample",
                detail: format!(" at t={t}: {}", stat_summary(&x)),
            });
        }
    }

    if req.trace {
        trace.push((0, x.clone()));
    }
    Ok(SampleOutput { samples: x, trace })
}

/// Sample `count` images conditioned on one embedding (no guidance).
pub fn reconstruct(
    model: &dyn EpsilonModel,
    sched: &NoiseSchedule,
    embedding: &Tensor,
    count: usize,
    seed: u64,
) -> Result<Tensor> {
    if embedding.numel() != model.cond_width() {
        return Err(Error::param(format!(
            "embedding width {} does not match the decoder's conditioning width {}",
            embedding.numel(),
            model.cond_width()
        )));
    }
    let req = SampleRequest::new(count, seed).with_cond(embedding.clone());
    Ok(ddpm_sample(model, sched, &req)?.samples)
}
