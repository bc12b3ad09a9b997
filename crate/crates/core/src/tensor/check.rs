//! Finite-difference gradient checking.

use super::{Graph, Node, Tensor};
use crate::{Real, Result};

/// Max relative error between the analytic gradient of `f` at `x` and
/// central finite differences with the given step.
///
/// The error for one element is `|a - n| / max(1, |a|, |n|)`, so tiny
/// gradients are compared absolutely and large ones relatively.
pub fn grad_check<F>(f: F, x: &Tensor, step: Real) -> Result<Real>
where
    F: Fn(&Graph, Node) -> Result<Node>,
{
    grad_check_multi(|g, xs| f(g, xs[0]), &[x.clone()], step)
}

/// Multi-input variant: checks the gradient w.r.t. every element of every
/// input tensor.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], step: Real) -> Result<Real>
where
    F: Fn(&Graph, &[Node]) -> Result<Node>,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    // Analytic gradients.
    let graph = Graph::new();
    let nodes: Vec<Node> = xs.iter().map(|x| graph.leaf(x.clone(), true)).collect();
    let loss = f(&graph, &nodes)?;
    graph.backward(loss)?;
    let analytic: Vec<Tensor> = nodes
        .iter()
        .zip(xs)
        .map(|(n, x)| graph.grad(*n).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<Real> {
        let g = Graph::new();
        let ns: Vec<Node> = inputs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        Ok(g.value(f(&g, &ns)?).item())
    };

    let mut worst: Real = 0.0;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            work[ti].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_tight() {
        let mut rng = crate::rng_from_seed(1);
        let x = Tensor::randn(vec![3, 4], &mut rng);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn group_norm_then_mean_passes() {
        let mut rng = crate::rng_from_seed(2);
        let x = Tensor::randn(vec![2, 4, 3, 3], &mut rng);
        // weight the mean so the gradient is not uniform
        let w = Tensor::from_fn(vec![2, 4, 3, 3], |i| ((i % 7) as Real - 3.0) * 0.5);
        let err = grad_check(
            |g, x| {
                let n = g.group_norm(x, 2, 1e-5)?;
                let wn = g.constant(w.clone());
                let p = g.mul(n, wn)?;
                g.mean_all(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_fn(vec![5], |i| i as Real);
        let graph = Graph::new();
        let n = graph.leaf(x.clone(), true);
        let c = graph.constant(Tensor::scalar(3.0));
        // loss ignores x entirely
        let loss = graph.mul(c, c).unwrap();
        graph.backward(loss).unwrap();
        assert!(graph.grad(n).is_none());
        // and through the checker: f(x) = 3 for all x
        let err = grad_check(|g, _x| Ok(g.scalar(3.0)), &x, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }
}
