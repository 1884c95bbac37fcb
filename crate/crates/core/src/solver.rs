//! Root finding for `g(h) = F(h) - h = 0`.
//!
//! [`broyden_solve`] is a limited-memory "good" Broyden method: the inverse
//! Jacobian estimate is `B = -I + sum_i u_i v_i^T`, rank-one updated after every
//! step, and the step is `x <- x - damping * B g(x)`. With the initial `-I`
//! the first step is exactly one fixed-point iteration.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{IfrError, Result};
use crate::tensor::Tensor;

/// Added to `|x|` in the relative residual so a zero root is measurable.
pub const REL_RESIDUAL_FLOOR: f64 = 1e-9;

fn default_max_iters() -> usize {
    15
}
fn default_rel_tol() -> f64 {
    1e-6
}
fn default_damping() -> f64 {
    1.0
}
fn default_divergence_factor() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// Secant pairs kept; `None` keeps `max_iters` of them.
    #[serde(default)]
    pub memory: Option<usize>,
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            damping: default_damping(),
            memory: None,
            divergence_factor: default_divergence_factor(),
        }
    }
}

impl SolverConfig {
    pub fn with_budget(&self, max_iters: usize) -> Self {
        Self {
            max_iters,
            ..self.clone()
        }
    }

    pub fn memory(&self) -> usize {
        self.memory.unwrap_or(self.max_iters).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(IfrError::config("solver max_iters must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(IfrError::config("solver rel_tol must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(IfrError::config("solver damping must lie in (0, 1]"));
        }
        if self.memory == Some(0) {
            return Err(IfrError::config("solver memory must be at least 1"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(IfrError::config("solver divergence_factor must exceed 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    /// The iterate with the smallest relative residual seen.
    pub root: Tensor,
    /// Relative residual of every evaluated iterate, starting with the initial guess.
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    /// Residual evaluations performed, equal to `residual_trace.len()`.
    pub iterations_used: usize,
    pub best_iteration: usize,
    /// Set when the solve stopped because the residual blew up or went non-finite.
    pub divergence: Option<String>,
}

impl SolverResult {
    pub fn best_residual(&self) -> f64 {
        self.residual_trace[self.best_iteration]
    }
}

fn rel_residual(g: &Tensor, x: &Tensor) -> f64 {
    g.norm() / (x.norm() + REL_RESIDUAL_FLOOR)
}

/// Finite residual or a divergence note; other errors propagate.
fn evaluate(
    residual_fn: &mut impl FnMut(&Tensor) -> Result<Tensor>,
    x: &Tensor,
) -> Result<std::result::Result<Tensor, String>> {
    match residual_fn(x) {
        Ok(g) => {
            x.ensure_same_shape(&g, "broyden_solve")?;
            if g.is_finite() {
                Ok(Ok(g))
            } else {
                Ok(Err("non-finite residual".into()))
            }
        }
        Err(IfrError::NonFinite { op }) => Ok(Err(format!("non-finite value in {op}"))),
        Err(e) => Err(e),
    }
}

struct InverseJacobian {
    us: VecDeque<Vec<f64>>,
    vs: VecDeque<Vec<f64>>,
    memory: usize,
}

impl InverseJacobian {
    fn new(memory: usize) -> Self {
        Self {
            us: VecDeque::with_capacity(memory),
            vs: VecDeque::with_capacity(memory),
            memory,
        }
    }

    /// `B y = -y + U (V^T y)`.
    fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = y.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = dot(v, y);
            axpy(&mut out, c, u);
        }
        out
    }

    /// `B^T y = -y + V (U^T y)`.
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = y.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = dot(u, y);
            axpy(&mut out, c, v);
        }
        out
    }

    /// `B <- B + (dx - B dg) dx^T B / (dx^T B dg)`.
    fn update(&mut self, dx: &[f64], dg: &[f64]) {
        let vt = self.apply_transpose(dx);
        let denom = dot(&vt, dg);
        if !denom.is_finite() || denom.abs() < 1e-300 {
            return;
        }
        let b_dg = self.apply(dg);
        let u: Vec<f64> = dx.iter().zip(&b_dg).map(|(a, b)| (a - b) / denom).collect();
        if u.iter().chain(&vt).any(|v| !v.is_finite()) {
            return;
        }
        if self.us.len() == self.memory {
            self.us.pop_front();
            self.vs.pop_front();
        }
        self.us.push_back(u);
        self.vs.push_back(vt);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Limited-memory Broyden root finding for `residual_fn(x) = 0` from `x0`.
///
/// Stops on `|g(x)| / (|x| + 1e-9) < rel_tol`, after `max_iters` steps, or when
/// the residual norm exceeds `divergence_factor` times its initial value or
/// stops being finite. The best iterate is always returned.
pub fn broyden_solve(
    mut residual_fn: impl FnMut(&Tensor) -> Result<Tensor>,
    x0: &Tensor,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    cfg.validate()?;
    x0.ensure_finite("broyden_solve")?;

    let mut x = x0.clone();
    let mut g = match evaluate(&mut residual_fn, &x)? {
        Ok(g) => g,
        Err(note) => {
            return Ok(SolverResult {
                root: x,
                residual_trace: vec![f64::INFINITY],
                converged: false,
                iterations_used: 1,
                best_iteration: 0,
                divergence: Some(format!("initial guess: {note}")),
            })
        }
    };
    let initial_norm = g.norm();
    let mut trace = vec![rel_residual(&g, &x)];
    let mut best_iteration = 0;
    let mut best = x.clone();
    let mut divergence = None;
    let mut inverse = InverseJacobian::new(cfg.memory());

    if trace[0] >= cfg.rel_tol {
        let mut direction = inverse.apply(g.data());
        for step in 1..=cfg.max_iters {
            let dx: Vec<f64> = direction.iter().map(|d| -cfg.damping * d).collect();
            let mut x_new = x.clone();
            axpy(x_new.data_mut(), 1.0, &dx);
            let g_new = match evaluate(&mut residual_fn, &x_new)? {
                Ok(g) => g,
                Err(note) => {
                    divergence = Some(format!("step {step}: {note}"));
                    break;
                }
            };
            let rel = rel_residual(&g_new, &x_new);
            trace.push(rel);
            if rel < trace[best_iteration] {
                best_iteration = step;
                best = x_new.clone();
            }
            if rel < cfg.rel_tol {
                break;
            }
            if g_new.norm() > cfg.divergence_factor * initial_norm {
                divergence = Some(format!(
                    "step {step}: residual norm {:.3e} exceeds {} x initial {:.3e}",
                    g_new.norm(),
                    cfg.divergence_factor,
                    initial_norm
                ));
                break;
            }
            let dg: Vec<f64> = g_new.data().iter().zip(g.data()).map(|(a, b)| a - b).collect();
            inverse.update(&dx, &dg);
            direction = inverse.apply(g_new.data());
            x = x_new;
            g = g_new;
        }
    }

    let converged = trace[best_iteration] < cfg.rel_tol;
    Ok(SolverResult {
        root: best,
        iterations_used: trace.len(),
        residual_trace: trace,
        converged,
        best_iteration,
        divergence,
    })
}

/// `n` applications of `map_fn` from `x0`; `trace[i] = |x_{i+1} - x_i|`.
pub fn fixed_point_iterate(
    mut map_fn: impl FnMut(&Tensor) -> Result<Tensor>,
    x0: &Tensor,
    n: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let mut x = x0.clone();
    let mut trace = Vec::with_capacity(n);
    for step in 0..n {
        let next = match map_fn(&x) {
            Ok(v) => v,
            Err(IfrError::NonFinite { .. }) => {
                return Err(IfrError::Divergence {
                    step,
                    detail: "non-finite iterate".into(),
                })
            }
            Err(e) => return Err(e),
        };
        if !next.is_finite() {
            return Err(IfrError::Divergence {
                step,
                detail: "non-finite iterate".into(),
            });
        }
        trace.push(next.sub(&x)?.norm());
        x = next;
    }
    Ok((x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn negated_identity_residual_solves_in_one_step() {
        let x0 = Tensor::from_vec(vec![3.0, -1.5, 0.25]);
        let r = broyden_solve(|x| Ok(x.scale(-1.0)), &x0, &SolverConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.root.max_abs(), 0.0);
        assert_eq!(r.best_iteration, 1);
        assert_eq!(r.iterations_used, r.residual_trace.len());
    }

    #[test]
    fn scalar_affine_fixed_point() {
        let r = broyden_solve(
            |h| Ok(h.map(|v| 0.5 * v + 1.0 - v)),
            &scalar(0.0),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.root.data()[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn already_converged_guess_takes_no_steps() {
        let r = broyden_solve(|h| Ok(h.scale(0.0)), &scalar(0.0), &SolverConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations_used, 1);
    }

    #[test]
    fn divergence_returns_best_iterate() {
        // g(x) = x grows under the initial -I step (x <- 2x).
        let cfg = SolverConfig {
            max_iters: 50,
            ..SolverConfig::default()
        };
        let r = broyden_solve(|x| Ok(x.map(|v| v * v * v + 1.0)), &scalar(5.0), &cfg).unwrap();
        let best = r.best_residual();
        assert!(r.residual_trace.iter().all(|&v| best <= v));
        if r.divergence.is_some() {
            assert!(!r.converged);
        }
    }

    #[test]
    fn non_finite_residual_is_reported_not_raised() {
        let r = broyden_solve(
            |x| Ok(x.map(|v| if v.abs() > 1.0 { f64::NAN } else { 4.0 })),
            &scalar(0.0),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(!r.converged);
        assert!(r.divergence.is_some());
        assert_eq!(r.root.data()[0], 0.0);
    }

    #[test]
    fn shape_changing_residual_is_an_error() {
        assert!(broyden_solve(|_| Ok(Tensor::zeros(&[2])), &scalar(1.0), &SolverConfig::default()).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SolverConfig { max_iters: 0, ..SolverConfig::default() },
            SolverConfig { rel_tol: 0.0, ..SolverConfig::default() },
            SolverConfig { damping: 1.5, ..SolverConfig::default() },
            SolverConfig { memory: Some(0), ..SolverConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn fixed_point_geometric_series() {
        let (x, trace) = fixed_point_iterate(|h| Ok(h.map(|v| 0.5 * v + 1.0)), &scalar(0.0), 10).unwrap();
        assert_eq!(x.data()[0], 1.998046875);
        assert_eq!(trace.len(), 10);
        let (x, trace) = fixed_point_iterate(|h| Ok(h.map(|v| 0.5 * v + 1.0)), &scalar(0.3), 0).unwrap();
        assert_eq!(x.data()[0], 0.3);
        assert!(trace.is_empty());
    }

    #[test]
    fn fixed_point_reports_divergence_step() {
        let err = fixed_point_iterate(|h| Ok(h.map(|v| v * 1e200)), &scalar(1.0), 5).unwrap_err();
        assert!(matches!(err, IfrError::Divergence { step: 1, .. }));
    }
}
