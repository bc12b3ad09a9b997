//! Sampling-time steering: classifier guidance (as a pluggable gradient
//! hook), classifier-free guidance, image guidance, and static/dynamic
//! thresholding. All pure tensor functions; batch elements independent.

use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Gradient hook for classifier guidance: maps `(x_t, t)` to
/// `grad_x log p(y | x_t, t)`.
pub type ClassifierGrad = Box<dyn Fn(&Tensor, usize) -> Result<Tensor>>;

/// Where the sampler applies thresholding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ThresholdTarget {
    /// Threshold the clean-image estimate, then rebuild the noise from it.
    #[default]
    X0Hat,
    /// Threshold the combined noise prediction directly.
    Epsilon,
}

/// Thresholding mode.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Threshold {
    #[default]
    None,
    /// Clamp to [-1, 1].
    Static,
    /// Percentile clamp-and-rescale; the conventional percentile is 99.5.
    Dynamic { percentile: Real },
}

impl Threshold {
    pub fn dynamic_default() -> Self {
        Threshold::Dynamic { percentile: 99.5 }
    }
}

/// Decay profile for image guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecayKind {
    /// `d_t = t / T`.
    #[default]
    Linear,
    /// `d_t = 1`.
    Constant,
    /// Half-cosine ramp `d_t = (1 - cos(pi t / T)) / 2`; 0 at t=0, 1 at t=T.
    Cosine,
}

impl DecayKind {
    pub fn at(self, t: usize, total: usize) -> Real {
        let frac = t as Real / total as Real;
        match self {
            DecayKind::Linear => frac,
            DecayKind::Constant => 1.0,
            DecayKind::Cosine => 0.5 * (1.0 - (std::f64::consts::PI as Real * frac).cos()),
        }
    }
}

/// Pull toward a base image during sampling.
#[derive(Clone, Debug)]
pub struct ImageGuide {
    pub base: Tensor,
    pub scale: Real,
    pub decay: DecayKind,
}

/// Optional classifier hook with its scale.
pub struct ClassifierGuide {
    pub scale: Real,
    pub grad_log_p: ClassifierGrad,
}

/// Everything the sampler needs to steer a trajectory.
#[derive(Default)]
pub struct GuidanceConfig {
    /// Classifier-free guidance scale `s`; 1 disables the unconditional pass.
    pub cfg_scale: Real,
    pub classifier: Option<ClassifierGuide>,
    pub image_guide: Option<ImageGuide>,
    pub threshold: Threshold,
    pub threshold_target: ThresholdTarget,
}

impl GuidanceConfig {
    /// Plain conditional sampling: no guidance of any kind.
    pub fn none() -> Self {
        GuidanceConfig { cfg_scale: 1.0, ..Default::default() }
    }

    pub fn with_cfg(mut self, s: Real) -> Self {
        self.cfg_scale = s;
        self
    }

    pub fn with_threshold(mut self, t: Threshold) -> Self {
        self.threshold = t;
        self
    }

    pub fn with_image_guide(mut self, base: Tensor, scale: Real, decay: DecayKind) -> Self {
        self.image_guide = Some(ImageGuide { base, scale, decay });
        self
    }
}

/// Classifier-free combination `eps_uncond + s * (eps_cond - eps_uncond)`.
/// The `s = 0` and `s = 1` endpoints reproduce their input exactly.
pub fn classifier_free(eps_cond: &Tensor, eps_uncond: &Tensor, s: Real) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::shape("classifier_free", "conditional / unconditional shapes differ"));
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_cond.zip_map(eps_uncond, "classifier_free", |c, u| u + s * (c - u))
}

/// Classifier-guided mean shift `mean + w * variance * grad_log_p`.
pub fn classifier_guided_mean(
    mean: &Tensor,
    variance: &Tensor,
    grad_log_p: &Tensor,
    w: Real,
) -> Result<Tensor> {
    if variance.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::param("classifier guidance needs positive variance"));
    }
    let shift = variance.zip_map(grad_log_p, "classifier_guided_mean", |v, g| v * g)?;
    mean.zip_map(&shift, "classifier_guided_mean", |m, s| m + w * s)
}

/// Image guidance step `x + w * d_t * (z - x)`.
pub fn image_guide(
    xt: &Tensor,
    z: &Tensor,
    w: Real,
    t: usize,
    total: usize,
    decay: DecayKind,
) -> Result<Tensor> {
    if w < 0.0 {
        return Err(Error::param(format!("image guidance scale must be >= 0, got {w}")));
    }
    if xt.shape() != z.shape() {
        return Err(Error::shape("image_guide", "latent and base image shapes differ"));
    }
    let pull = w * decay.at(t, total);
    // exact identity / total-pull endpoints
    if pull == 0.0 {
        return Ok(xt.clone());
    }
    if pull == 1.0 {
        return Ok(z.clone());
    }
    xt.zip_map(z, "image_guide", |x, zv| x + pull * (zv - x))
}

/// Clamp every value to [-1, 1].
pub fn static_threshold(x: &Tensor) -> Tensor {
    x.clamp(-1.0, 1.0)
}

/// Percentile clamp-and-rescale applied per sample (per dim-0 slice): with
/// `s` the `percentile` of the absolute values, inputs with `s <= 1` pass
/// through unchanged, otherwise values are clamped to `[-s, s]` and divided
/// by `s`.
pub fn dynamic_threshold(x0_hat: &Tensor, percentile: Real) -> Result<Tensor> {
    if !(0.0 < percentile && percentile < 100.0) {
        return Err(Error::param(format!("percentile must lie in (0, 100), got {percentile}")));
    }
    let batch = if x0_hat.ndim() == 0 { 1 } else { x0_hat.shape()[0] };
    let per = x0_hat.numel() / batch;
    let mut out = x0_hat.clone();
    for b in 0..batch {
        let sl = &mut out.data_mut()[b * per..(b + 1) * per];
        let mut abs: Vec<Real> = sl.iter().map(|v| v.abs()).collect();
        abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s = interpolated_percentile(&abs, percentile);
        if s > 1.0 {
            for v in sl.iter_mut() {
                *v = v.clamp(-s, s) / s;
            }
        }
    }
    Ok(out)
}

/// Linear interpolation between order statistics of already-sorted data:
/// rank `p/100 * (n-1)`.
fn interpolated_percentile(sorted: &[Real], p: Real) -> Real {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as Real;
    let lo = rank.floor() as usize;
    let frac = rank - lo as Real;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn cfg_endpoint_identities() {
        let mut rng = rng_from_seed(1);
        let c = Tensor::randn(vec![6], &mut rng);
        let u = Tensor::randn(vec![6], &mut rng);
        assert_eq!(classifier_free(&c, &u, 1.0).unwrap(), c);
        assert_eq!(classifier_free(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn cfg_paper_scale_arithmetic() {
        // eps_cond = 2, eps_uncond = 1, s = 6 -> 1 + 6*(2-1) = 7
        let c = Tensor::scalar(2.0);
        let u = Tensor::scalar(1.0);
        assert_eq!(classifier_free(&c, &u, 6.0).unwrap().item(), 7.0);
    }

    #[test]
    fn cfg_is_affine() {
        let mut rng = rng_from_seed(2);
        let c = Tensor::randn(vec![10], &mut rng);
        let u = Tensor::randn(vec![10], &mut rng);
        let s = 3.7;
        let out = classifier_free(&c, &u, s).unwrap();
        for i in 0..10 {
            let lhs = out.data()[i] - u.data()[i];
            let rhs = s * (c.data()[i] - u.data()[i]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_mean_shift() {
        let mean = Tensor::scalar(0.0);
        let var = Tensor::scalar(0.5);
        let grad = Tensor::scalar(2.0);
        assert_eq!(classifier_guided_mean(&mean, &var, &grad, 3.0).unwrap().item(), 3.0);
        assert_eq!(classifier_guided_mean(&mean, &var, &grad, 0.0).unwrap().item(), 0.0);
        let zero_grad = Tensor::scalar(0.0);
        assert_eq!(classifier_guided_mean(&mean, &var, &zero_grad, 3.0).unwrap().item(), 0.0);
    }

    #[test]
    fn image_guide_identities() {
        let mut rng = rng_from_seed(3);
        let x = Tensor::randn(vec![4], &mut rng);
        let z = Tensor::randn(vec![4], &mut rng);
        // w = 0: unchanged
        assert_eq!(image_guide(&x, &z, 0.0, 10, 100, DecayKind::Linear).unwrap(), x);
        // t = T, w = 1, linear decay: total pull
        assert_eq!(image_guide(&x, &z, 1.0, 100, 100, DecayKind::Linear).unwrap(), z);
    }

    #[test]
    fn image_guide_paper_scale_value() {
        // x=0, z=1, w=0.005, t=500, T=1000 -> 0.005 * 0.5 = 0.0025
        let x = Tensor::scalar(0.0);
        let z = Tensor::scalar(1.0);
        let out = image_guide(&x, &z, 0.005, 500, 1000, DecayKind::Linear).unwrap();
        assert!((out.item() - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn image_guide_is_contraction() {
        let mut rng = rng_from_seed(4);
        let x = Tensor::randn(vec![8], &mut rng);
        let z = Tensor::randn(vec![8], &mut rng);
        let (w, t, total) = (0.8, 30, 100);
        let out = image_guide(&x, &z, w, t, total, DecayKind::Linear).unwrap();
        let factor = 1.0 - w * t as Real / total as Real;
        for i in 0..8 {
            let lhs = (out.data()[i] - z.data()[i]).abs();
            let rhs = factor * (x.data()[i] - z.data()[i]).abs();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_profiles() {
        assert_eq!(DecayKind::Linear.at(50, 100), 0.5);
        assert_eq!(DecayKind::Constant.at(3, 100), 1.0);
        assert!((DecayKind::Cosine.at(100, 100) - 1.0).abs() < 1e-12);
        assert!(DecayKind::Cosine.at(0, 100).abs() < 1e-12);
    }

    #[test]
    fn static_threshold_clamps() {
        let x = Tensor::new(vec![3], vec![0.4, 1.7, -3.0]).unwrap();
        let y = static_threshold(&x);
        assert_eq!(y.data(), &[0.4, 1.0, -1.0]);
    }

    #[test]
    fn dynamic_threshold_identity_in_range() {
        let mut rng = rng_from_seed(5);
        let x = Tensor::randn(vec![2, 16], &mut rng).clamp(-1.0, 1.0);
        for p in [1.0, 50.0, 99.5] {
            assert_eq!(dynamic_threshold(&x, p).unwrap(), x);
        }
    }

    #[test]
    fn dynamic_threshold_two_point_example() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        let y = dynamic_threshold(&x, 99.5).unwrap();
        // s interpolates to just under 2; the outlier clamps to s and maps to 1
        assert_eq!(y.data()[1], 1.0);
        assert!(y.data()[0].abs() < 1e-12);
    }

    #[test]
    fn dynamic_threshold_outliers_vs_sort_oracle() {
        // 992 in-range values plus 4 outliers at +5 and 4 at -5; at the 99.5
        // percentile the cut lands inside the outlier block, so s = 5 and the
        // outliers map exactly to +-1.
        let mut rng = rng_from_seed(6);
        let mut vals: Vec<Real> = Vec::with_capacity(1000);
        for i in 0..992 {
            let _ = i;
            vals.push((rng_val(&mut rng) * 2.0 - 1.0) * 0.999);
        }
        for _ in 0..4 {
            vals.push(5.0);
            vals.push(-5.0);
        }
        let x = Tensor::new(vec![1, 1000], vals.clone()).unwrap();
        let y = dynamic_threshold(&x, 99.5).unwrap();

        // brute-force oracle
        let mut abs: Vec<Real> = vals.iter().map(|v| v.abs()).collect();
        abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank: Real = 99.5 / 100.0 * 999.0;
        let lo = rank.floor() as usize;
        let s = abs[lo] + (abs[lo + 1] - abs[lo]) * (rank - lo as Real);
        assert!((s - 5.0).abs() < 1e-12, "cut should land in the outlier block, s={s}");
        for (i, &v) in vals.iter().enumerate() {
            let expect = v.clamp(-s, s) / s;
            assert_eq!(y.data()[i], expect, "element {i}");
        }
        for &v in &y.data()[992..] {
            assert!((v.abs() - 1.0).abs() < 1e-15);
        }

        fn rng_val(rng: &mut impl rand::Rng) -> Real {
            rng.random::<f64>() as Real
        }
    }

    #[test]
    fn dynamic_threshold_output_in_range_preserves_order() {
        let mut rng = rng_from_seed(7);
        for _ in 0..50 {
            let x = Tensor::randn(vec![2, 40], &mut rng).scale(2.0);
            let y = dynamic_threshold(&x, 99.5).unwrap();
            for b in 0..2 {
                let xs = &x.data()[b * 40..(b + 1) * 40];
                let ys = &y.data()[b * 40..(b + 1) * 40];
                for i in 0..40 {
                    assert!(ys[i] >= -1.0 - 1e-12 && ys[i] <= 1.0 + 1e-12);
                    assert_eq!(ys[i].signum() * xs[i].signum() >= 0.0, true);
                    for j in 0..40 {
                        if xs[i] < xs[j] {
                            assert!(ys[i] <= ys[j] + 1e-12, "ordering broken");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dynamic_threshold_is_per_sample() {
        // one saturated sample and one in-range sample: only the first changes
        let mut data = vec![0.5; 8];
        data[0] = 4.0;
        let mut tail = vec![0.25; 8];
        data.append(&mut tail);
        let x = Tensor::new(vec![2, 8], data).unwrap();
        let y = dynamic_threshold(&x, 90.0).unwrap();
        assert!(y.data()[0] < 4.0);
        assert_eq!(&y.data()[8..], &x.data()[8..]);
    }

    #[test]
    fn percentile_rejects_out_of_domain() {
        let x = Tensor::zeros(vec![4]);
        assert!(dynamic_threshold(&x, 0.0).is_err());
        assert!(dynamic_threshold(&x, 100.0).is_err());
    }
}
