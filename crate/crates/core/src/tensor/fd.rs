use super::Tensor;
use crate::error::{IfrError, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(IfrError::config("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(IfrError::NonFinite {
                op: "finite_difference_grad",
            });
        }
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_difference_grad(|t| t.dot(t), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_vec(vec![0.3, -7.0, 1e3]);
        let g = finite_difference_grad(|t| t.sum(), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn non_finite_evaluation_rejected() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(finite_difference_grad(|_| f64::NAN, &x, 1e-5).is_err());
        assert!(finite_difference_grad(|t| t.sum(), &x, 0.0).is_err());
    }
}
