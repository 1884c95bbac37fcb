use super::Tensor;
use crate::error::Result;

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes the cotangent where the input is strictly positive; the subgradient
/// at exactly zero is taken as 0.
pub fn relu_vjp(x: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
    x.ensure_same_shape(cotangent, "relu_vjp")?;
    Ok(x.zip_map(cotangent, |v, d| if v > 0.0 { d } else { 0.0 }))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b, "add")?;
    Ok(a.zip_map(b, |p, q| p + q))
}

/// Both operands receive the cotangent unchanged.
pub fn add_vjp(cotangent: &Tensor) -> (Tensor, Tensor) {
    (cotangent.clone(), cotangent.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_and_masks_at_zero() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let d = relu_vjp(&x, &Tensor::from_vec(vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::from_vec(vec![1.5, -2.0, 3.25]);
        assert_eq!(add(&x, &Tensor::zeros_like(&x)).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(&[2])).is_err());
    }
}
