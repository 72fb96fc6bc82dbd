//! Low-rank sigmoid forget gate.

use crate::numerics::{add, matmul, sigmoid, Tensor};
use crate::{Error, Result};

/// `sigmoid(X · W1 · W2)`, one gate vector per row.
pub fn gate_values(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    sigmoid(&matmul(&matmul(x, w1)?, w2)?)
}

/// `sigmoid(X · W1 · W2 + b)`.
pub fn gate_values_biased(x: &Tensor, w1: &Tensor, w2: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, f) = w2.dims2()?;
    if b.numel() != f {
        return Err(Error::shape("gate_values", w2.shape(), b.shape()));
    }
    let b = b.clone().reshape([1, f])?;
    sigmoid(&add(&matmul(&matmul(x, w1)?, w2)?, &b)?)
}

/// Logit of the gate value every gate starts near.
pub fn init_gate_bias(target: f64) -> f64 {
    (target / (1.0 - target)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_factor_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([4, 6], 1.0, &mut rng);
        let w1 = Tensor::randn([6, 3], 1.0, &mut rng);
        let g = gate_values(&x, &w1, &Tensor::zeros([3, 5])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
        let g = gate_values(&x, &Tensor::zeros([6, 3]), &w1.clone().reshape([3, 6]).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturation_limits() {
        let x = Tensor::new([2, 1], vec![40.0, -40.0]).unwrap();
        let one = Tensor::full([1, 1], 1.0);
        let g = gate_values(&x, &one, &one).unwrap();
        assert!(g.get2(0, 0) > 1.0 - 1e-15 && g.get2(0, 0) <= 1.0);
        assert!(g.get2(1, 0) < 1e-15 && g.get2(1, 0) >= 0.0);
    }

    #[test]
    fn bias_sets_initial_level() {
        let b = init_gate_bias(0.95);
        let g = gate_values_biased(
            &Tensor::zeros([1, 2]),
            &Tensor::zeros([2, 1]),
            &Tensor::zeros([1, 3]),
            &Tensor::full([3], b),
        )
        .unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.95).abs() < 1e-12));
    }
}
