//! Adam with decoupled weight decay, global-norm gradient clipping, EMA
//! shadow weights and linear learning-rate decay.

use std::collections::BTreeMap;

use crate::models::{Grads, Params};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Decoupled weight-decay rate; 0 disables it (the decoder uses 0, the
    /// translator 1e-4).
    pub weight_decay: Real,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct OptimState {
    pub cfg: OptimConfig,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(cfg: OptimConfig, params: &Params) -> Self {
        let zeros =
            |p: &Params| p.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())));
        OptimState { cfg, step: 0, m: zeros(params).collect(), v: zeros(params).collect() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One bias-corrected update at learning rate `lr`. Gradients must be
    /// finite; the caller decides whether to skip a step instead.
    pub fn step(&mut self, params: &mut Params, grads: &Grads, lr: Real) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::param("non-finite gradient passed to the optimizer"));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment buffer");
            let v = self.v.get_mut(name).expect("moment buffer");
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                let mut pv = p.data()[i];
                if self.cfg.weight_decay > 0.0 {
                    pv *= decay;
                }
                p.data_mut()[i] = pv - lr * update;
            }
        }
        Ok(())
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`; returns
/// the observed pre-clip norm.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: Real) -> Real {
    assert!(max_norm > 0.0);
    let mut sq = 0.0;
    for (_, g) in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Exponential moving average of the weights; sampling uses the shadow copy.
pub struct EmaState {
    pub rate: Real,
    shadow: Params,
}

impl EmaState {
    pub fn new(params: &Params, rate: Real) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param(format!("EMA rate must lie in [0, 1), got {rate}")));
        }
        Ok(EmaState { rate, shadow: params.clone() })
    }

    /// `shadow <- rate * shadow + (1 - rate) * params`
    pub fn update(&mut self, params: &Params) {
        for (name, s) in self.shadow.iter_mut() {
            let p = params.get(name).expect("shadow tracks the same parameter set");
            for i in 0..s.numel() {
                s.data_mut()[i] = self.rate * s.data()[i] + (1.0 - self.rate) * p.data()[i];
            }
        }
    }

    pub fn shadow(&self) -> &Params {
        &self.shadow
    }

    pub fn into_shadow(self) -> Params {
        self.shadow
    }
}

/// `initial * (1 - step / total)`.
pub fn lr_linear_decay(initial: Real, step: usize, total_steps: usize) -> Real {
    debug_assert!(step <= total_steps);
    initial * (1.0 - step as Real / total_steps as Real)
}
