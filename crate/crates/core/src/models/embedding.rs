//! Sinusoidal timestep embedding.

use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Half sines, half cosines at geometrically spaced frequencies with maximum
/// period 10^4. All components lie in [-1, 1]; `dim` must be even.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param(format!("embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    let max_period: Real = 10_000.0;
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as Real / half as Real).exp();
        data.push(((t as Real) * freq).sin());
    }
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as Real / half as Real).exp();
        data.push(((t as Real) * freq).cos());
    }
    Tensor::new(vec![dim], data)
}

/// The embedding repeated over a batch: `[batch, dim]`.
pub fn sinusoidal_embedding_batch(t: usize, dim: usize, batch: usize) -> Result<Tensor> {
    let row = sinusoidal_embedding(t, dim)?;
    Ok(Tensor::from_fn(vec![batch, dim], |i| row.data()[i % dim]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_zero_is_zeros_then_ones() {
        let e = sinusoidal_embedding(0, 8).unwrap();
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
    }

    #[test]
    fn components_bounded() {
        for t in [1, 17, 999, 10_000] {
            let e = sinusoidal_embedding(t, 64).unwrap();
            assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(sinusoidal_embedding(3, 7).is_err());
        assert!(sinusoidal_embedding(3, 0).is_err());
    }

    #[test]
    fn timesteps_distinguishable_exhaustively() {
        // every pair (t, t + delta) for T = 1000, dim = 128 is separated
        let dim = 128;
        let embs: Vec<Tensor> =
            (0..=1000).map(|t| sinusoidal_embedding(t, dim).unwrap()).collect();
        for a in 0..1000usize {
            for b in (a + 1)..=1000 {
                let mut dist_sq: Real = 0.0;
                for i in 0..dim {
                    let d = embs[a].data()[i] - embs[b].data()[i];
                    dist_sq += d * d;
                    if dist_sq > 1e-8 {
                        break;
                    }
                }
                assert!(dist_sq > 1e-10, "t={a} and t={b} collide (d^2 = {dist_sq})");
            }
        }
    }
}
