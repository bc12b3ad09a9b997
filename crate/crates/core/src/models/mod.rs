//! Epsilon-prediction networks and the embedding translator.
//!
//! Parameters live in a [`Params`] store keyed by name; a forward pass binds
//! them into a graph (trainable for training, constant for sampling). The
//! sampler sees models through [`EpsilonModel`], which works on plain
//! tensors in eval mode.

mod analytic;
mod embedding;
mod mlp;
mod translator;
mod unet;

pub use analytic::AnalyticGaussianScore;
pub use embedding::sinusoidal_embedding;
pub use mlp::{MlpEps, MlpEpsConfig};
pub use translator::{TranslatorConfig, TranslatorMlp};
pub use unet::{TinyUNet, TinyUNetConfig};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::tensor::{Graph, Node, Tensor};
use crate::{Error, Real, Result};

/// Ordered named-tensor set holding a model's parameters.
#[derive(Clone, Debug, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate parameter {name}");
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::param(format!("missing parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::param(format!("missing parameter '{name}'"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Bind every parameter into the graph.
    pub fn bind(&self, g: &Graph, trainable: bool) -> NodeMap {
        let map = self.map.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable))).collect();
        NodeMap { map }
    }
}

/// Graph nodes for a bound parameter set.
pub struct NodeMap {
    map: BTreeMap<String, Node>,
}

impl NodeMap {
    /// Panics on a missing name: model code owns its naming scheme.
    pub fn node(&self, name: &str) -> Node {
        *self.map.get(name).unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Node)> {
        self.map.iter()
    }
}

/// Gradients collected after backward, keyed like the parameters.
pub fn collect_grads(g: &Graph, nodes: &NodeMap, params: &Params) -> Grads {
    let map = nodes
        .iter()
        .map(|(name, node)| {
            let grad = g
                .grad(*node)
                .unwrap_or_else(|| Tensor::zeros(params.get(name).unwrap().shape().to_vec()));
            (name.clone(), grad)
        })
        .collect();
    Grads { map }
}

/// Named gradient set.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    pub(crate) map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

/// Training/eval switch carrying the dropout RNG in train mode.
pub type DropoutMode<'a> = Option<&'a mut ChaCha20Rng>;

pub(crate) fn maybe_dropout(
    g: &Graph,
    x: Node,
    p: Real,
    mode: &mut DropoutMode<'_>,
) -> Result<Node> {
    match mode {
        Some(rng) => g.dropout(x, p, true, *rng),
        None => Ok(x),
    }
}

/// Conditional noise-prediction model as the sampler sees it: eval-mode
/// forward on plain tensors, emitting the `(eps, v)` heads.
pub trait EpsilonModel {
    /// Per-example data shape, e.g. `[2]` or `[3, 16, 16]`.
    fn sample_shape(&self) -> Vec<usize>;

    /// Conditioning embedding width (0 for unconditional-only models).
    fn cond_width(&self) -> usize;

    /// `x_t: [B, ..sample_shape]`, optional `cond: [B, cond_width]`.
    fn predict(&self, x_t: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)>;
}

/// A noise-prediction model the training loop can drive: owned parameters
/// plus a graph-mode forward with bound parameter nodes.
pub trait TrainableEpsModel: EpsilonModel {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    fn forward_train(
        &self,
        g: &Graph,
        nodes: &NodeMap,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
        mode: &mut DropoutMode<'_>,
    ) -> Result<(Node, Node)>;
}

impl TrainableEpsModel for MlpEps {
    fn params(&self) -> &Params {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
    fn forward_train(
        &self,
        g: &Graph,
        nodes: &NodeMap,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
        _mode: &mut DropoutMode<'_>,
    ) -> Result<(Node, Node)> {
        self.forward(g, nodes, x_t, t, cond)
    }
}

impl TrainableEpsModel for TinyUNet {
    fn params(&self) -> &Params {
        &self.params
    }
    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }
    fn forward_train(
        &self,
        g: &Graph,
        nodes: &NodeMap,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
        mode: &mut DropoutMode<'_>,
    ) -> Result<(Node, Node)> {
        self.forward(g, nodes, x_t, t, cond, mode)
    }
}

// ── init helpers ────────────────────────────────────────────────────

/// Dense init: normal with std `gain / sqrt(fan_in)`.
pub(crate) fn init_dense(rng: &mut impl Rng, rows: usize, cols: usize, gain: Real) -> Tensor {
    let std = gain / (rows as Real).sqrt();
    Tensor::randn(vec![rows, cols], rng).scale(std)
}

/// 3x3 conv kernel init: normal with std `gain / sqrt(9 * cin)`.
pub(crate) fn init_conv(rng: &mut impl Rng, cout: usize, cin: usize, gain: Real) -> Tensor {
    let std = gain / ((9 * cin) as Real).sqrt();
    Tensor::randn(vec![cout, cin, 3, 3], rng).scale(std)
}

/// 1x1 convolution realized as a per-pixel channel map:
/// `x: [B,C,H,W]`, `w: [C, Cout]` -> `[B,Cout,H,W]`.
pub(crate) fn conv1x1(g: &Graph, x: Node, w: Node) -> Result<Node> {
    let xs = g.shape_of(x);
    let ws = g.shape_of(w);
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let flat = g.reshape(x, vec![b, c, h * wd])?;
    let t = g.transpose_12(flat)?; // [B, HW, C]
    let m = g.matmul(t, w)?; // [B, HW, Cout]
    let back = g.transpose_12(m)?; // [B, Cout, HW]
    g.reshape(back, vec![b, ws[1], h, wd])
}

/// Dense layer `x @ w + b` for `x: [B, in]`.
pub(crate) fn linear(g: &Graph, x: Node, w: Node, b: Node) -> Result<Node> {
    let m = g.matmul(x, w)?;
    g.add_row_bias(m, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn params_round_trip_and_order() {
        let mut p = Params::new();
        p.insert("b", Tensor::scalar(2.0));
        p.insert("a", Tensor::scalar(1.0));
        let names: Vec<&String> = p.names().collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(p.get("a").unwrap().item(), 1.0);
        assert!(p.get("zz").is_err());
    }

    #[test]
    fn conv1x1_matches_manual_channel_mix() {
        let g = Graph::new();
        let mut rng = rng_from_seed(5);
        let x = Tensor::randn(vec![2, 3, 2, 2], &mut rng);
        let w = Tensor::randn(vec![3, 4], &mut rng);
        let xn = g.constant(x.clone());
        let wn = g.constant(w.clone());
        let y = conv1x1(&g, xn, wn).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 4, 2, 2]);
        for b in 0..2 {
            for oc in 0..4 {
                for pix in 0..4 {
                    let mut acc = 0.0;
                    for ic in 0..3 {
                        acc += x.data()[(b * 3 + ic) * 4 + pix] * w.data()[ic * 4 + oc];
                    }
                    let got = yv.data()[(b * 4 + oc) * 4 + pix];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
