//! Embedding translator: a residual MLP mapping text embeddings to image
//! embeddings in standardized space. A stack of N identical layers (layer
//! norm, two affine maps with GELU, dropout, additive skip) between an input
//! and an output projection; with N = 0 it reduces to the two projections.

use rand_chacha::ChaCha20Rng;

use super::{init_dense, linear, maybe_dropout, DropoutMode, NodeMap, Params};
use crate::tensor::{Graph, Node, Tensor};
use crate::{Error, Real, Result};

const LN_EPS: Real = 1e-5;

#[derive(Clone, Debug)]
pub struct TranslatorConfig {
    pub width: usize,
    /// Number of identical residual layers (the paper tunes this by grid
    /// search; 30 at full scale).
    pub layers: usize,
    pub dropout: Real,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig { width: 64, layers: 4, dropout: 0.1 }
    }
}

pub struct TranslatorMlp {
    pub cfg: TranslatorConfig,
    pub params: Params,
}

impl TranslatorMlp {
    pub fn init(cfg: TranslatorConfig, rng: &mut ChaCha20Rng) -> Self {
        let w = cfg.width;
        let mut p = Params::new();
        p.insert("in.w", init_dense(rng, w, w, 1.0));
        p.insert("in.b", Tensor::zeros(vec![w]));
        for l in 0..cfg.layers {
            p.insert(format!("l{l}.ln.scale"), Tensor::full(vec![w], 1.0));
            p.insert(format!("l{l}.ln.shift"), Tensor::zeros(vec![w]));
            p.insert(format!("l{l}.w1"), init_dense(rng, w, w, 1.0));
            p.insert(format!("l{l}.b1"), Tensor::zeros(vec![w]));
            p.insert(format!("l{l}.w2"), init_dense(rng, w, w, 1.0));
            p.insert(format!("l{l}.b2"), Tensor::zeros(vec![w]));
        }
        // zero-initialized output projection: the untrained model predicts
        // the standardized mean
        p.insert("out.w", Tensor::zeros(vec![w, w]));
        p.insert("out.b", Tensor::zeros(vec![w]));
        TranslatorMlp { cfg, params: p }
    }

    /// `y_t: [B, width]` in standardized space -> predicted image embedding.
    pub fn forward(
        &self,
        g: &Graph,
        nodes: &NodeMap,
        y_t: &Tensor,
        mode: &mut DropoutMode<'_>,
    ) -> Result<Node> {
        if y_t.ndim() != 2 || y_t.shape()[1] != self.cfg.width {
            return Err(Error::shape("translator", format!("expected [B, {}]", self.cfg.width)));
        }
        let x = g.constant(y_t.clone());
        let mut h = linear(g, x, nodes.node("in.w"), nodes.node("in.b"))?;
        for l in 0..self.cfg.layers {
            let mut u = g.layer_norm(h, LN_EPS)?;
            u = g.mul_row_bias(u, nodes.node(&format!("l{l}.ln.scale")))?;
            u = g.add_row_bias(u, nodes.node(&format!("l{l}.ln.shift")))?;
            u = linear(g, u, nodes.node(&format!("l{l}.w1")), nodes.node(&format!("l{l}.b1")))?;
            u = g.gelu(u)?;
            u = linear(g, u, nodes.node(&format!("l{l}.w2")), nodes.node(&format!("l{l}.b2")))?;
            u = maybe_dropout(g, u, self.cfg.dropout, mode)?;
            h = g.add(h, u)?;
        }
        linear(g, h, nodes.node("out.w"), nodes.node("out.b"))
    }

    /// Eval-mode prediction on plain tensors.
    pub fn predict(&self, y_t: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let nodes = self.params.bind(&g, false);
        let mut mode: DropoutMode = None;
        let out = self.forward(&g, &nodes, y_t, &mut mode)?;
        Ok(g.value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn zero_head_predicts_zero() {
        let m = TranslatorMlp::init(TranslatorConfig::default(), &mut rng_from_seed(1));
        let mut rng = rng_from_seed(2);
        let y = Tensor::randn(vec![3, 64], &mut rng);
        let out = m.predict(&y).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_layers_is_two_projections() {
        let cfg = TranslatorConfig { width: 8, layers: 0, dropout: 0.0 };
        let mut m = TranslatorMlp::init(cfg, &mut rng_from_seed(3));
        assert_eq!(m.params.len(), 4);
        // set out.w to identity so the composition is visible
        let eye = Tensor::from_fn(vec![8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        m.params.set("out.w", eye).unwrap();
        let mut rng = rng_from_seed(4);
        let y = Tensor::randn(vec![2, 8], &mut rng);
        let out = m.predict(&y).unwrap();
        // equals in-projection of y
        let w = m.params.get("in.w").unwrap();
        for r in 0..2 {
            for c in 0..8 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += y.data()[r * 8 + k] * w.data()[k * 8 + c];
                }
                assert!((out.data()[r * 8 + c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let m = TranslatorMlp::init(TranslatorConfig::default(), &mut rng_from_seed(5));
        let y = Tensor::zeros(vec![2, 32]);
        assert!(m.predict(&y).is_err());
    }

    #[test]
    fn gradient_check_through_layers() {
        let cfg = TranslatorConfig { width: 6, layers: 2, dropout: 0.0 };
        let mut m = TranslatorMlp::init(cfg, &mut rng_from_seed(6));
        let mut rng = rng_from_seed(7);
        // a zero output projection would make the check vacuous
        m.params.set("out.w", Tensor::randn(vec![6, 6], &mut rng)).unwrap();
        let y = Tensor::randn(vec![2, 6], &mut rng);
        for target in ["in.w", "l0.w1", "l1.ln.scale"] {
            let base = m.params.get(target).unwrap().clone();
            let err = crate::tensor::grad_check(
                |g, p| {
                    let mut nodes = m.params.bind(g, false);
                    nodes.map.insert(target.to_string(), p);
                    let mut mode: DropoutMode = None;
                    let out = m.forward(g, &nodes, &y, &mut mode)?;
                    // force dependence on the output even with zero out-proj
                    let sq = g.mul(out, out)?;
                    let s = g.sum_all(sq)?;
                    let o = g.sum_all(out)?;
                    g.add(s, o)
                },
                &base,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{target}: {err}");
        }
    }
}
