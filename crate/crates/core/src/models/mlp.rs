//! Point-cloud epsilon network: a small SiLU MLP over the concatenation of
//! the data point, the timestep embedding and the conditioning embedding,
//! with separate eps and v heads.

use rand_chacha::ChaCha20Rng;

use super::embedding::sinusoidal_embedding_batch;
use super::{init_dense, linear, EpsilonModel, NodeMap, Params};
use crate::tensor::{Graph, Node, Tensor};
use crate::{Error, Real, Result};

#[derive(Clone, Debug)]
pub struct MlpEpsConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl Default for MlpEpsConfig {
    fn default() -> Self {
        MlpEpsConfig { data_dim: 2, hidden: 128, hidden_layers: 3, time_dim: 32, cond_dim: 8 }
    }
}

pub struct MlpEps {
    pub cfg: MlpEpsConfig,
    pub params: Params,
}

impl MlpEps {
    pub fn init(cfg: MlpEpsConfig, rng: &mut ChaCha20Rng) -> Self {
        let mut p = Params::new();
        let input = cfg.data_dim + cfg.time_dim + cfg.cond_dim;
        p.insert("in.w", init_dense(rng, input, cfg.hidden, 1.0));
        p.insert("in.b", Tensor::zeros(vec![cfg.hidden]));
        for l in 0..cfg.hidden_layers {
            p.insert(format!("h{l}.w"), init_dense(rng, cfg.hidden, cfg.hidden, 1.0));
            p.insert(format!("h{l}.b"), Tensor::zeros(vec![cfg.hidden]));
        }
        // small but nonzero head init keeps gradients flowing to the trunk
        p.insert("eps.w", init_dense(rng, cfg.hidden, cfg.data_dim, 0.1));
        p.insert("eps.b", Tensor::zeros(vec![cfg.data_dim]));
        p.insert("v.w", init_dense(rng, cfg.hidden, cfg.data_dim, 0.1));
        p.insert("v.b", Tensor::zeros(vec![cfg.data_dim]));
        MlpEps { cfg, params: p }
    }

    /// Graph-mode forward. `x_t: [B, data_dim]`, `cond: [B, cond_dim]`
    /// (`None` means the zero vector).
    pub fn forward(
        &self,
        g: &Graph,
        nodes: &NodeMap,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
    ) -> Result<(Node, Node)> {
        let cfg = &self.cfg;
        if x_t.ndim() != 2 || x_t.shape()[1] != cfg.data_dim {
            return Err(Error::shape("mlp_eps", format!("expected [B, {}]", cfg.data_dim)));
        }
        let batch = x_t.shape()[0];
        let cond_t = match cond {
            Some(c) => {
                if c.shape() != [batch, cfg.cond_dim] {
                    return Err(Error::shape(
                        "mlp_eps",
                        format!("conditioning must be [B, {}]", cfg.cond_dim),
                    ));
                }
                c.clone()
            }
            None => Tensor::zeros(vec![batch, cfg.cond_dim]),
        };
        let temb = sinusoidal_embedding_batch(t, cfg.time_dim, batch)?;

        let x = g.constant(x_t.clone());
        let te = g.constant(temb);
        let cn = g.constant(cond_t);
        let xt_te = g.concat(x, te, 1)?;
        let input = g.concat(xt_te, cn, 1)?;

        let mut h = linear(g, input, nodes.node("in.w"), nodes.node("in.b"))?;
        h = g.silu(h)?;
        for l in 0..cfg.hidden_layers {
            h = linear(g, h, nodes.node(&format!("h{l}.w")), nodes.node(&format!("h{l}.b")))?;
            h = g.silu(h)?;
        }
        let eps = linear(g, h, nodes.node("eps.w"), nodes.node("eps.b"))?;
        let v_logit = linear(g, h, nodes.node("v.w"), nodes.node("v.b"))?;
        let v = g.sigmoid(v_logit)?;
        Ok((eps, v))
    }
}

impl EpsilonModel for MlpEps {
    fn sample_shape(&self) -> Vec<usize> {
        vec![self.cfg.data_dim]
    }

    fn cond_width(&self) -> usize {
        self.cfg.cond_dim
    }

    fn predict(&self, x_t: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let nodes = self.params.bind(&g, false);
        let (eps, v) = self.forward(&g, &nodes, x_t, t, cond)?;
        Ok((g.value(eps), g.value(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::collect_grads;
    use crate::rng_from_seed;

    fn tiny() -> MlpEps {
        let cfg = MlpEpsConfig { data_dim: 2, hidden: 16, hidden_layers: 2, time_dim: 8, cond_dim: 4 };
        MlpEps::init(cfg, &mut rng_from_seed(11))
    }

    #[test]
    fn output_shapes_match_input() {
        let m = tiny();
        let mut rng = rng_from_seed(1);
        let x = Tensor::randn(vec![5, 2], &mut rng);
        let (eps, v) = m.predict(&x, 3, None).unwrap();
        assert_eq!(eps.shape(), &[5, 2]);
        assert_eq!(v.shape(), &[5, 2]);
        assert!(v.data().iter().all(|&u| (0.0..=1.0).contains(&u)));
    }

    #[test]
    fn zero_cond_equals_none_cond() {
        let m = tiny();
        let mut rng = rng_from_seed(2);
        let x = Tensor::randn(vec![3, 2], &mut rng);
        let zeros = Tensor::zeros(vec![3, 4]);
        let a = m.predict(&x, 7, None).unwrap();
        let b = m.predict(&x, 7, Some(&zeros)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = tiny();
        let mut rng = rng_from_seed(3);
        let x = Tensor::randn(vec![4, 2], &mut rng);
        let (eps, _) = m.predict(&x, 5, None).unwrap();
        // permute rows 0 and 2
        let mut permuted = x.clone();
        for c in 0..2 {
            let tmp = permuted.data()[c];
            permuted.data_mut()[c] = permuted.data()[2 * 2 + c];
            permuted.data_mut()[2 * 2 + c] = tmp;
        }
        let (eps_p, _) = m.predict(&permuted, 5, None).unwrap();
        for c in 0..2 {
            assert_eq!(eps.data()[c], eps_p.data()[2 * 2 + c]);
            assert_eq!(eps.data()[2 * 2 + c], eps_p.data()[c]);
        }
    }

    #[test]
    fn both_heads_reach_all_trunk_parameters() {
        let m = tiny();
        let mut rng = rng_from_seed(4);
        let x = Tensor::randn(vec![2, 2], &mut rng);
        for head in ["eps", "v"] {
            let g = Graph::new();
            let nodes = m.params.bind(&g, true);
            let (eps, v) = m.forward(&g, &nodes, &x, 2, None).unwrap();
            let out = if head == "eps" { eps } else { v };
            let loss = g.mean_all(out).unwrap();
            g.backward(loss).unwrap();
            let grads = collect_grads(&g, &nodes, &m.params);
            for (name, grad) in grads.iter() {
                if name.starts_with("in.") || name.starts_with("h") {
                    assert!(
                        grad.data().iter().any(|&v| v != 0.0),
                        "{head} head leaves no gradient on {name}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_check_full_network() {
        // relative error through the whole MLP at 64-bit
        let m = tiny();
        let mut rng = rng_from_seed(5);
        let x = Tensor::randn(vec![2, 2], &mut rng);
        // check wrt a couple of parameter tensors: first layer weight + v head
        for target in ["in.w", "v.w", "h1.w"] {
            let base = m.params.get(target).unwrap().clone();
            let err = crate::tensor::grad_check(
                |g, p| {
                    let mut nodes = m.params.bind(g, false);
                    nodes.map.insert(target.to_string(), p);
                    let (eps, v) = m.forward(g, &nodes, &x, 3, None)?;
                    let s1 = g.sum_all(eps)?;
                    let s2 = g.sum_all(v)?;
                    g.add(s1, s2)
                },
                &base,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{target}: max rel err {err}");
        }
    }
}
