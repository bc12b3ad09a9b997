//! Training loops: the decoder loop (conditional diffusion with embedding
//! dropping, hybrid loss, clipping, Adam, EMA, linear LR decay) and the
//! supervised translator loop with validation-based early stopping.

mod optim;

pub use optim::{clip_grad_norm, lr_linear_decay, EmaState, OptimConfig, OptimState};

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::models::{
    collect_grads, DropoutMode, Params, TrainableEpsModel, TranslatorMlp,
};
use crate::objectives::l_hybrid;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Tensor};
use crate::{rng_from_seed, Error, Real, Result};

/// Dataset rows for decoder training: data tensors paired with their
/// conditioning embeddings.
pub struct TrainingSet {
    /// `[N, ..sample_shape]`
    pub data: Tensor,
    /// `[N, cond_width]`
    pub embeddings: Tensor,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_width(&self) -> usize {
        self.data.numel() / self.len()
    }

    pub fn cond_width(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Uniform-with-replacement minibatch.
    pub fn sample_batch(&self, rng: &mut ChaCha20Rng, batch: usize) -> (Tensor, Tensor) {
        let n = self.len();
        let per = self.sample_width();
        let w = self.cond_width();
        let mut xshape = vec![batch];
        xshape.extend_from_slice(&self.data.shape()[1..]);
        let mut x = Tensor::zeros(xshape);
        let mut e = Tensor::zeros(vec![batch, w]);
        for b in 0..batch {
            let i = rng.random_range(0..n);
            x.data_mut()[b * per..(b + 1) * per].copy_from_slice(&self.data.data()[i * per..(i + 1) * per]);
            e.data_mut()[b * w..(b + 1) * w].copy_from_slice(&self.embeddings.data()[i * w..(i + 1) * w]);
        }
        (x, e)
    }
}

/// Zero each embedding row independently with probability `p`; returns the
/// masked tensor and how many rows were dropped.
pub fn apply_embedding_drop(cond: &Tensor, p: Real, rng: &mut ChaCha20Rng) -> (Tensor, usize) {
    let (b, w) = (cond.shape()[0], cond.shape()[1]);
    let mut out = cond.clone();
    let mut dropped = 0;
    for row in 0..b {
        let u: f64 = rng.random();
        if (u as Real) < p {
            out.data_mut()[row * w..(row + 1) * w].fill(0.0);
            dropped += 1;
        }
    }
    (out, dropped)
}

#[derive(Clone, Debug)]
pub struct DecoderTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub lambda: Real,
    /// Embedding drop probability for classifier-free training.
    pub drop_prob: Real,
    pub clip_norm: Real,
    pub ema_rate: Real,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Also evaluate the hybrid loss under the EMA weights each step
    /// (eval mode); used by smoothing diagnostics.
    pub track_ema_loss: bool,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        DecoderTrainConfig {
            iterations: 3000,
            batch_size: 32,
            lr: 3e-4,
            lambda: 0.001,
            drop_prob: 0.2,
            clip_norm: 1.0,
            ema_rate: 0.9999,
            seed: 0,
            checkpoint_every: 500,
            track_ema_loss: false,
        }
    }
}

/// One loss-log row.
#[derive(Clone, Copy, Debug)]
pub struct LossRow {
    pub step: usize,
    pub l_simple: Real,
    pub l_vlb: Real,
    pub total: Real,
    pub ema_total: Option<Real>,
}

pub struct TrainReport {
    pub loss_log: Vec<LossRow>,
    pub events: Vec<String>,
    /// EMA shadow of the trained weights.
    pub ema: Params,
    /// Fraction of training examples whose embedding was dropped.
    pub dropped_fraction: Real,
}

/// Checkpoint hook: `(step, raw_params, ema_params)`.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &Params, &Params) -> Result<()>;

/// Decoder training loop: sample a batch and a timestep, form `x_t`, drop
/// embeddings at random, descend on the hybrid loss, clip, step Adam with a
/// linearly decayed learning rate, and track the EMA weights.
pub fn train_decoder<M: TrainableEpsModel>(
    model: &mut M,
    sched: &NoiseSchedule,
    dataset: &TrainingSet,
    cfg: &DecoderTrainConfig,
    mut on_checkpoint: Option<CheckpointHook<'_>>,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Config("decoder training dataset is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.iterations == 0 {
        return Err(Error::Config("batch size and iterations must be positive".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut opt = OptimState::new(OptimConfig { lr: cfg.lr, ..Default::default() }, model.params());
    let mut ema = EmaState::new(model.params(), cfg.ema_rate)?;
    let mut loss_log = Vec::with_capacity(cfg.iterations);
    let mut events = Vec::new();
    let mut dropped_total = 0usize;

    for it in 0..cfg.iterations {
        let (x0, emb) = dataset.sample_batch(&mut rng, cfg.batch_size);
        let t = rng.random_range(1..=sched.steps());
        let eps = Tensor::randn(x0.shape().to_vec(), &mut rng);
        let (cond, dropped) = apply_embedding_drop(&emb, cfg.drop_prob, &mut rng);
        dropped_total += dropped;

        let g = Graph::new();
        let nodes = model.params().bind(&g, true);
        let (parts, total) = {
            let mut mode: DropoutMode = Some(&mut rng);
            let mut fwd = |g: &Graph, xt: &Tensor| {
                model.forward_train(g, &nodes, xt, t, Some(&cond), &mut mode)
            };
            l_hybrid(&g, &mut fwd, &x0, t, &eps, sched, cfg.lambda)?
        };
        g.backward(total)?;
        let mut grads = collect_grads(&g, &nodes, model.params());

        if grads.all_finite() {
            clip_grad_norm(&mut grads, cfg.clip_norm);
            let lr = lr_linear_decay(cfg.lr, it, cfg.iterations);
            opt.step(model.params_mut(), &grads, lr)?;
            ema.update(model.params());
        } else {
            events.push(format!("step {it}: non-finite gradient, step skipped"));
        }

        let ema_total = if cfg.track_ema_loss {
            let ge = Graph::new();
            let enodes = ema.shadow().bind(&ge, false);
            let mut mode: DropoutMode = None;
            let mut fwd = |g: &Graph, xt: &Tensor| {
                model.forward_train(g, &enodes, xt, t, Some(&cond), &mut mode)
            };
            let (ep, _) = l_hybrid(&ge, &mut fwd, &x0, t, &eps, sched, cfg.lambda)?;
            Some(ep.total)
        } else {
            None
        };

        loss_log.push(LossRow {
            step: it,
            l_simple: parts.l_simple,
            l_vlb: parts.l_vlb_term,
            total: parts.total,
            ema_total,
        });

        let is_last = it + 1 == cfg.iterations;
        if let Some(hook) = on_checkpoint.as_mut() {
            if (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) || is_last {
                hook(it + 1, model.params(), ema.shadow())?;
            }
        }
    }

    let dropped_fraction =
        dropped_total as Real / (cfg.iterations * cfg.batch_size) as Real;
    Ok(TrainReport { loss_log, events, ema: ema.into_shadow(), dropped_fraction })
}

/// Standardized embedding pairs for translator training.
pub struct PairSet {
    /// `[N, width]` text-side inputs.
    pub inputs: Tensor,
    /// `[N, width]` image-side targets.
    pub targets: Tensor,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.inputs.shape()[1]
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let w = self.width();
        let mut x = Tensor::zeros(vec![idx.len(), w]);
        let mut y = Tensor::zeros(vec![idx.len(), w]);
        for (r, &i) in idx.iter().enumerate() {
            x.data_mut()[r * w..(r + 1) * w].copy_from_slice(&self.inputs.data()[i * w..(i + 1) * w]);
            y.data_mut()[r * w..(r + 1) * w].copy_from_slice(&self.targets.data()[i * w..(i + 1) * w]);
        }
        (x, y)
    }
}

#[derive(Clone, Debug)]
pub struct TranslatorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub weight_decay: Real,
    pub val_fraction: Real,
    pub seed: u64,
}

impl Default for TranslatorTrainConfig {
    fn default() -> Self {
        TranslatorTrainConfig {
            epochs: 12,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

pub struct TranslatorReport {
    /// Epoch whose weights were kept (0 = initialization).
    pub best_epoch: usize,
    pub best_val_mse: Real,
    /// Validation MSE after each epoch, starting with the initialization.
    pub val_curve: Vec<Real>,
    /// MSE of the identity map on the validation split.
    pub identity_mse: Real,
}

fn mse_of(a: &Tensor, b: &Tensor) -> Real {
    let mut acc = 0.0;
    for i in 0..a.numel() {
        let d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    acc / a.numel() as Real
}

/// Supervised translator training with a seeded train/validation split;
/// keeps the parameters of the epoch with the lowest validation MSE.
pub fn train_translator(
    model: &mut TranslatorMlp,
    pairs: &PairSet,
    cfg: &TranslatorTrainConfig,
) -> Result<TranslatorReport> {
    if pairs.is_empty() {
        return Err(Error::Config("translator pair set is empty".into()));
    }
    if pairs.width() != model.cfg.width {
        return Err(Error::Config(format!(
            "pair width {} does not match translator width {}",
            pairs.width(),
            model.cfg.width
        )));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let n = pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    let n_val = ((n as Real * cfg.val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (train_idx, val_idx) = order.split_at(n - n_val);
    let mut train_idx = train_idx.to_vec();
    let (val_x, val_y) = pairs.gather(val_idx);

    let eval_val = |m: &TranslatorMlp| -> Result<Real> {
        let pred = m.predict(&val_x)?;
        Ok(mse_of(&pred, &val_y))
    };
    let identity_mse = mse_of(&val_x, &val_y);

    let mut opt = OptimState::new(
        OptimConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
        &model.params,
    );
    let mut best = model.params.clone();
    let mut best_val = eval_val(model)?;
    let mut best_epoch = 0usize;
    let mut val_curve = vec![best_val];

    for epoch in 1..=cfg.epochs {
        shuffle(&mut train_idx, &mut rng);
        for chunk in train_idx.chunks(cfg.batch_size.max(1)) {
            let (bx, by) = pairs.gather(chunk);
            let g = Graph::new();
            let nodes = model.params.bind(&g, true);
            let mut mode: DropoutMode = Some(&mut rng);
            let out = model.forward(&g, &nodes, &bx, &mut mode)?;
            let target = g.constant(by);
            let loss = g.mse(out, target)?;
            g.backward(loss)?;
            let grads = collect_grads(&g, &nodes, &model.params);
            if grads.all_finite() {
                opt.step(&mut model.params, &grads, cfg.lr)?;
            }
        }
        let val = eval_val(model)?;
        val_curve.push(val);
        if val < best_val {
            best_val = val;
            best = model.params.clone();
            best_epoch = epoch;
        }
    }

    model.params = best;
    Ok(TranslatorReport { best_epoch, best_val_mse: best_val, val_curve, identity_mse })
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha20Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MlpEps, MlpEpsConfig, TranslatorConfig};
    use crate::schedule::NoiseSchedule;

    fn toy_set(n: usize, seed: u64) -> TrainingSet {
        // two 2-D Gaussians with class-tagged embeddings
        let mut rng = rng_from_seed(seed);
        let w = 4;
        let mut data = Tensor::zeros(vec![n, 2]);
        let mut emb = Tensor::zeros(vec![n, w]);
        for i in 0..n {
            let class = i % 2;
            let cx = if class == 0 { -2.0 } else { 2.0 };
            let gx: f64 = rng.sample(rand_distr::StandardNormal);
            let gy: f64 = rng.sample(rand_distr::StandardNormal);
            data.data_mut()[i * 2] = cx + 0.3 * gx as Real;
            data.data_mut()[i * 2 + 1] = 0.3 * gy as Real;
            emb.data_mut()[i * w + class] = 1.0;
        }
        TrainingSet { data, embeddings: emb }
    }

    fn tiny_mlp(seed: u64) -> MlpEps {
        let cfg = MlpEpsConfig { data_dim: 2, hidden: 24, hidden_layers: 1, time_dim: 8, cond_dim: 4 };
        MlpEps::init(cfg, &mut rng_from_seed(seed))
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let mut m = tiny_mlp(1);
        let sched = NoiseSchedule::cosine_default(10).unwrap();
        let ds = TrainingSet { data: Tensor::zeros(vec![1, 2]), embeddings: Tensor::zeros(vec![1, 4]) };
        let mut bad = DecoderTrainConfig { iterations: 0, ..Default::default() };
        assert!(train_decoder(&mut m, &sched, &ds, &bad, None).is_err());
        bad.iterations = 1;
        bad.batch_size = 0;
        assert!(train_decoder(&mut m, &sched, &ds, &bad, None).is_err());
    }

    #[test]
    fn fixed_seed_reproduces_loss_log() {
        let sched = NoiseSchedule::cosine_default(10).unwrap();
        let ds = toy_set(64, 3);
        let cfg = DecoderTrainConfig {
            iterations: 30,
            batch_size: 8,
            checkpoint_every: 0,
            ..Default::default()
        };
        let mut m1 = tiny_mlp(7);
        let r1 = train_decoder(&mut m1, &sched, &ds, &cfg, None).unwrap();
        let mut m2 = tiny_mlp(7);
        let r2 = train_decoder(&mut m2, &sched, &ds, &cfg, None).unwrap();
        assert_eq!(r1.loss_log.len(), r2.loss_log.len());
        for (a, b) in r1.loss_log.iter().zip(&r2.loss_log) {
            assert_eq!(a.total, b.total);
        }
        // parameters byte-identical too
        for (name, t) in m1.params.iter() {
            assert_eq!(t.data(), m2.params.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn drop_probability_one_forces_unconditional() {
        let sched = NoiseSchedule::cosine_default(10).unwrap();
        let ds = toy_set(32, 5);
        let cfg = DecoderTrainConfig {
            iterations: 20,
            batch_size: 4,
            drop_prob: 1.0,
            checkpoint_every: 0,
            ..Default::default()
        };
        let mut m = tiny_mlp(9);
        let report = train_decoder(&mut m, &sched, &ds, &cfg, None).unwrap();
        assert_eq!(report.dropped_fraction, 1.0);
    }

    #[test]
    fn drop_fraction_concentrates_around_p() {
        let mut rng = rng_from_seed(11);
        let p = 0.2;
        let n = 10_000;
        let cond = Tensor::full(vec![n, 2], 1.0);
        let (_, dropped) = apply_embedding_drop(&cond, p, &mut rng);
        let frac = dropped as Real / n as Real;
        let se = (p * (1.0 - p) / n as Real).sqrt();
        assert!((frac - p).abs() < 3.0 * se, "fraction {frac}");
    }

    #[test]
    fn loss_log_finite_and_smoke_decreases() {
        let sched = NoiseSchedule::cosine_default(20).unwrap();
        let ds = toy_set(128, 13);
        let cfg = DecoderTrainConfig {
            iterations: 300,
            batch_size: 16,
            checkpoint_every: 0,
            track_ema_loss: true,
            ..Default::default()
        };
        let mut m = tiny_mlp(21);
        let report = train_decoder(&mut m, &sched, &ds, &cfg, None).unwrap();
        assert!(report.loss_log.iter().all(|r| r.total.is_finite()));
        assert!(report.events.is_empty());
        let head: Real =
            report.loss_log[..50].iter().map(|r| r.l_simple).sum::<Real>() / 50.0;
        let tail: Real =
            report.loss_log[250..].iter().map(|r| r.l_simple).sum::<Real>() / 50.0;
        assert!(tail < head, "no learning: head {head}, tail {tail}");
    }

    #[test]
    fn checkpoint_hook_fires_on_cadence_and_final() {
        let sched = NoiseSchedule::cosine_default(10).unwrap();
        let ds = toy_set(32, 1);
        let cfg = DecoderTrainConfig {
            iterations: 25,
            batch_size: 4,
            checkpoint_every: 10,
            ..Default::default()
        };
        let mut m = tiny_mlp(2);
        let mut seen = Vec::new();
        let mut hook = |step: usize, _p: &Params, _e: &Params| {
            seen.push(step);
            Ok(())
        };
        train_decoder(&mut m, &sched, &ds, &cfg, Some(&mut hook)).unwrap();
        assert_eq!(seen, vec![10, 20, 25]);
    }

    fn linear_map_pairs(n: usize, w: usize, seed: u64) -> PairSet {
        let mut rng = rng_from_seed(seed);
        let a = Tensor::randn(vec![w, w], &mut rng).scale(1.0 / (w as Real).sqrt());
        let inputs = Tensor::randn(vec![n, w], &mut rng);
        let mut targets = Tensor::zeros(vec![n, w]);
        for r in 0..n {
            for c in 0..w {
                let mut acc = 0.0;
                for k in 0..w {
                    acc += inputs.data()[r * w + k] * a.data()[k * w + c];
                }
                targets.data_mut()[r * w + c] = acc;
            }
        }
        PairSet { inputs, targets }
    }

    #[test]
    fn translator_learns_a_linear_map() {
        let pairs = linear_map_pairs(512, 8, 17);
        let cfg = TranslatorConfig { width: 8, layers: 1, dropout: 0.0 };
        let mut m = TranslatorMlp::init(cfg, &mut rng_from_seed(3));
        let tcfg = TranslatorTrainConfig { epochs: 40, batch_size: 32, ..Default::default() };
        let report = train_translator(&mut m, &pairs, &tcfg).unwrap();
        assert!(
            report.best_val_mse < 1e-3,
            "val mse {} (identity {})",
            report.best_val_mse,
            report.identity_mse
        );
        assert!(report.best_val_mse < 0.1 * report.identity_mse);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let pairs = linear_map_pairs(64, 8, 2);
        let cfg = TranslatorConfig { width: 8, layers: 1, dropout: 0.0 };
        let mut m = TranslatorMlp::init(cfg, &mut rng_from_seed(4));
        let init = m.params.clone();
        let tcfg = TranslatorTrainConfig { epochs: 0, ..Default::default() };
        let report = train_translator(&mut m, &pairs, &tcfg).unwrap();
        assert_eq!(report.best_epoch, 0);
        for (name, t) in init.iter() {
            assert_eq!(t.data(), m.params.get(name).unwrap().data());
        }
    }

    #[test]
    fn best_epoch_weights_are_kept() {
        let pairs = linear_map_pairs(256, 8, 5);
        let cfg = TranslatorConfig { width: 8, layers: 1, dropout: 0.0 };
        let mut m = TranslatorMlp::init(cfg, &mut rng_from_seed(6));
        let tcfg = TranslatorTrainConfig { epochs: 10, batch_size: 32, ..Default::default() };
        let report = train_translator(&mut m, &pairs, &tcfg).unwrap();
        // the retained weights reproduce the reported best validation MSE
        let n = pairs.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from_seed(tcfg.seed);
        shuffle(&mut order, &mut rng);
        let n_val = ((n as Real * tcfg.val_fraction).round() as usize).max(1);
        let (_, val_idx) = order.split_at(n - n_val);
        let (vx, vy) = pairs.gather(val_idx);
        let pred = m.predict(&vx).unwrap();
        assert!((mse_of(&pred, &vy) - report.best_val_mse).abs() < 1e-12);
    }
}
