use crate::error::{IfrError, Result};
use crate::tensor::Tensor;

/// Mean per-pixel binary cross-entropy with logits, and its gradient.
///
/// Per pixel: `max(z, 0) - z t + ln(1 + exp(-|z|))`.
pub fn bce_mask_loss(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    logits.ensure_same_shape(target, "bce_mask_loss")?;
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(IfrError::config("bce_mask_loss targets must be 0 or 1"));
    }
    logits.ensure_finite("bce_mask_loss")?;
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros_like(logits);
    for ((g, &z), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(target.data()) {
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - t) / n;
    }
    Ok((loss / n, grad))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Intersection over union of `logits > 0` against a binary target. Two empty
/// masks agree perfectly.
pub fn mask_iou(logits: &Tensor, target: &Tensor) -> Result<f64> {
    logits.ensure_same_shape(target, "mask_iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&z, &t) in logits.data().iter().zip(target.data()) {
        let (p, t) = (z > 0.0, t > 0.5);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn pixel_accuracy(logits: &Tensor, target: &Tensor) -> Result<f64> {
    logits.ensure_same_shape(target, "pixel_accuracy")?;
    let hits = logits
        .data()
        .iter()
        .zip(target.data())
        .filter(|(&z, &t)| (z > 0.0) == (t > 0.5))
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_grad;

    #[test]
    fn zero_logits_cost_ln2() {
        let z = Tensor::zeros(&[1, 2, 2]);
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (l, _) = bce_mask_loss(&z, &t).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logit_costs_nothing() {
        let (l, _) = bce_mask_loss(&Tensor::from_vec(vec![50.0]), &Tensor::from_vec(vec![1.0])).unwrap();
        assert!((0.0..1e-20).contains(&l));
        let (l, _) = bce_mask_loss(&Tensor::from_vec(vec![-800.0]), &Tensor::from_vec(vec![1.0])).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = Tensor::from_vec(vec![-2.0, -0.3, 0.0, 0.7, 3.0, 12.0]);
        let t = Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let (_, g) = bce_mask_loss(&z, &t).unwrap();
        let fd = finite_difference_grad(|z| bce_mask_loss(z, &t).unwrap().0, &z, 1e-5).unwrap();
        assert!(g.max_abs_diff(&fd) < 1e-8);
    }

    #[test]
    fn rejects_soft_targets_and_shape_mismatch() {
        assert!(bce_mask_loss(&Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![0.5])).is_err());
        assert!(bce_mask_loss(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn iou_cases() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let exact = t.map(|v| if v > 0.5 { 1.0 } else { -1.0 });
        assert_eq!(mask_iou(&exact, &t).unwrap(), 1.0);
        assert_eq!(mask_iou(&Tensor::full(&[1, 2, 2], -1.0), &t).unwrap(), 0.0);
        // Rectangles [0,2)x[0,2) and [1,3)x[0,2) on a 3x2 grid: 2 / 6.
        let a = Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![-1.0, -1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((mask_iou(&b, &a).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }
}
