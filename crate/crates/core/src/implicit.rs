//! The implicit refinement layer.
//!
//! Forward: the equilibrium `H* = F(H*; X)` is found as the root of
//! `F(h; X) - h` with Broyden iterations from `h = 0`.
//!
//! Backward: instead of forming the inverse Jacobian of `F(h; X) - h`, the
//! adjoint `a` solving `a = upstream + a^T dF/dh` is found with the same root
//! finder, then pulled once through `dF/dtheta` and `dF/dx` at the equilibrium.
//! Nothing from the forward iterations is kept: the backward pass only sees
//! the equilibrium, the input, the map and the upstream gradient.

use crate::blocks::RefinementMap;
use crate::error::{IfrError, Result};
use crate::solver::{broyden_solve, fixed_point_iterate, SolverConfig, SolverResult, REL_RESIDUAL_FLOOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct IfrForwardRecord<'a, M: RefinementMap + ?Sized> {
    pub map: &'a M,
    pub equilibrium: Tensor,
    pub input: Tensor,
    pub forward_result: SolverResult,
}

impl<M: RefinementMap + ?Sized> IfrForwardRecord<'_, M> {
    pub fn converged(&self) -> bool {
        self.forward_result.converged
    }

    /// `|F(H*; X) - H*| / (|H*| + 1e-9)`, recomputed.
    pub fn fixed_point_residual(&self) -> Result<f64> {
        let next = self.map.apply(&self.equilibrium, &self.input)?;
        Ok(next.sub(&self.equilibrium)?.norm() / (self.equilibrium.norm() + REL_RESIDUAL_FLOOR))
    }
}

#[derive(Debug, Clone)]
pub struct IfrGradients<G> {
    pub params: G,
    pub input: Tensor,
    /// The adjoint vector `a`.
    pub adjoint: Tensor,
    pub adjoint_result: SolverResult,
}

impl<G> IfrGradients<G> {
    pub fn converged(&self) -> bool {
        self.adjoint_result.converged
    }
}

/// Solves `F(h; x) = h` from `h = 0`.
pub fn ifr_forward<'a, M: RefinementMap + ?Sized>(
    map: &'a M,
    x: &Tensor,
    cfg: &SolverConfig,
) -> Result<IfrForwardRecord<'a, M>> {
    x.ensure_finite("ifr_forward")?;
    let h0 = Tensor::zeros_like(x);
    let result = broyden_solve(|h| map.apply(h, x)?.sub(h), &h0, cfg)?;
    Ok(IfrForwardRecord {
        map,
        equilibrium: result.root.clone(),
        input: x.clone(),
        forward_result: result,
    })
}

/// As [`ifr_forward`], but when the Broyden solve reports divergence the
/// equilibrium is replaced by `max_iters` plain fixed-point steps if those end
/// with a smaller residual.
pub fn ifr_forward_with_fallback<'a, M: RefinementMap + ?Sized>(
    map: &'a M,
    x: &Tensor,
    cfg: &SolverConfig,
) -> Result<IfrForwardRecord<'a, M>> {
    let mut rec = ifr_forward(map, x, cfg)?;
    if rec.forward_result.divergence.is_none() {
        return Ok(rec);
    }
    let Ok((h, _)) = fixed_point_iterate(|h| map.apply(h, x), &Tensor::zeros_like(x), cfg.max_iters) else {
        return Ok(rec);
    };
    let residual = map.apply(&h, x)?.sub(&h)?.norm() / (h.norm() + REL_RESIDUAL_FLOOR);
    if residual < rec.forward_result.best_residual() {
        rec.equilibrium = h;
    }
    Ok(rec)
}

/// Implicit gradients `(dL/dtheta, dL/dx)` for `dL/dH* = upstream`.
pub fn ifr_backward<M: RefinementMap + ?Sized>(
    rec: &IfrForwardRecord<'_, M>,
    upstream: &Tensor,
    cfg: &SolverConfig,
) -> Result<IfrGradients<M::Grads>> {
    if upstream.shape() != rec.equilibrium.shape() {
        return Err(IfrError::shape(
            "ifr_backward",
            format!(
                "upstream {:?} vs equilibrium {:?}",
                upstream.shape(),
                rec.equilibrium.shape()
            ),
        ));
    }
    let map = rec.map;
    let (_, tape) = map.record(&rec.equilibrium, &rec.input)?;
    let a0 = Tensor::zeros_like(upstream);
    let adjoint_result = broyden_solve(
        |a| {
            let mut r = map.vjp_hidden(&tape, a)?;
            r.axpy(1.0, upstream);
            r.axpy(-1.0, a);
            Ok(r)
        },
        &a0,
        cfg,
    )?;
    let adjoint = adjoint_result.root.clone();
    let (_, input, params) = map.vjp_all(&tape, &adjoint)?;
    Ok(IfrGradients {
        params,
        input,
        adjoint,
        adjoint_result,
    })
}

/// `F(h; x) = A h + x` on flattened features; a linear stand-in for the block
/// with closed-form equilibria and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    /// `n x n`, row-major.
    pub matrix: Tensor,
}

impl AffineMap {
    pub fn new(matrix: Tensor) -> Result<Self> {
        match matrix.shape() {
            [r, c] if r == c => Ok(Self { matrix }),
            s => Err(IfrError::shape("AffineMap", format!("expected a square matrix, got {s:?}"))),
        }
    }

    pub fn scalar(a: f64) -> Self {
        Self {
            matrix: Tensor::new(vec![1, 1], vec![a]).expect("1x1"),
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Tensor::zeros(&[n, n]);
        for (i, v) in d.iter().enumerate() {
            m.data_mut()[i * n + i] = *v;
        }
        Self { matrix: m }
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    fn matvec(&self, v: &[f64], transpose: bool) -> Vec<f64> {
        let n = self.dim();
        let a = self.matrix.data();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if transpose { a[j * n + i] } else { a[i * n + j] } * v[j])
                    .sum()
            })
            .collect()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.len() != self.dim() {
            return Err(IfrError::shape(
                "AffineMap",
                format!("{} values for a {}-dimensional map", t.len(), self.dim()),
            ));
        }
        Ok(())
    }
}

impl RefinementMap for AffineMap {
    type Tape = Tensor;
    type Grads = Tensor;

    fn apply(&self, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.check(h)?;
        h.ensure_same_shape(x, "AffineMap")?;
        let mut out = Tensor::new(h.shape().to_vec(), self.matvec(h.data(), false))?;
        out.axpy(1.0, x);
        Ok(out)
    }

    fn record(&self, h: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.apply(h, x)?, h.clone()))
    }

    fn vjp_hidden(&self, tape: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        self.check(cotangent)?;
        Tensor::new(tape.shape().to_vec(), self.matvec(cotangent.data(), true))
    }

    fn vjp_all(&self, tape: &Tensor, cotangent: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let dh = self.vjp_hidden(tape, cotangent)?;
        let n = self.dim();
        let mut da = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                da.data_mut()[i * n + j] = cotangent.data()[i] * tape.data()[j];
            }
        }
        Ok((dh, cotangent.clone(), da))
    }

    fn zero_grads(&self) -> Tensor {
        Tensor::zeros_like(&self.matrix)
    }

    fn accumulate(acc: &mut Tensor, g: &Tensor) {
        acc.axpy(1.0, g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_proxy_equilibrium_and_gradients() {
        let map = AffineMap::scalar(0.5);
        let x = Tensor::from_vec(vec![1.0]);
        let cfg = SolverConfig::default();
        let rec = ifr_forward(&map, &x, &cfg).unwrap();
        assert!(rec.converged());
        assert!((rec.equilibrium.data()[0] - 2.0).abs() < 1e-12);

        let up = Tensor::from_vec(vec![3.0]);
        let g = ifr_backward(&rec, &up, &cfg).unwrap();
        // dL/dx = u / (1 - a); dL/da = u H* / (1 - a).
        assert!((g.input.data()[0] - 6.0).abs() < 1e-12);
        assert!((g.params.data()[0] - 3.0 * 2.0 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let map = AffineMap::diagonal(&[0.3, -0.2]);
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let cfg = SolverConfig::default();
        let rec = ifr_forward(&map, &x, &cfg).unwrap();
        let g = ifr_backward(&rec, &Tensor::zeros(&[2]), &cfg).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.params.max_abs(), 0.0);
    }

    #[test]
    fn upstream_shape_checked() {
        let map = AffineMap::scalar(0.5);
        let cfg = SolverConfig::default();
        let rec = ifr_forward(&map, &Tensor::from_vec(vec![1.0]), &cfg).unwrap();
        assert!(ifr_backward(&rec, &Tensor::zeros(&[2]), &cfg).is_err());
    }

    #[test]
    fn fixed_point_certificate_holds_when_converged() {
        let map = AffineMap::diagonal(&[0.9, 0.1, -0.4]);
        let x = Tensor::from_vec(vec![1.0, -1.0, 0.5]);
        let cfg = SolverConfig::default();
        let rec = ifr_forward(&map, &x, &cfg).unwrap();
        assert!(rec.converged());
        assert!(rec.fixed_point_residual().unwrap() <= cfg.rel_tol);
    }
}
