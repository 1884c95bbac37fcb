//! Convergence analysis of a weight-tied refinement map: long-unroll
//! norm-difference traces, power-iteration estimates of the spectral radius
//! of `dF/dh`, and the gap between the root-finder's equilibrium and a long
//! unroll.

use crate::blocks::{unrolled_shared_forward, RefinementMap};
use crate::error::{IfrError, Result};
use crate::implicit::ifr_forward;
use crate::rng::SplitMix64;
use crate::solver::SolverConfig;
use crate::tensor::Tensor;

pub const DEFAULT_UNROLL_STEPS: usize = 10_000;
pub const LONG_UNROLL_STEPS: usize = 100_000;

/// Norm differences beyond this multiple of the first one count as blow-up.
const GROWTH_LIMIT: f64 = 1e6;
/// A trace ending above this fraction of its first entry (and above
/// `STALL_FLOOR`) is reported as not converging.
const STALL_FRACTION: f64 = 1e-3;
const STALL_FLOOR: f64 = 1e-10;
const JVP_STEP: f64 = 1e-5;
const MAX_REPROBES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// `|h_{i+1} - h_i|` for each completed step.
    pub norm_diff_trace: Vec<f64>,
    /// Unroll steps at which the spectral radius was probed.
    pub probe_steps: Vec<usize>,
    pub spectral_radius_estimates: Vec<f64>,
    pub implicit_gap: Option<f64>,
    pub steps: usize,
    pub divergence: Option<String>,
}

impl ConvergenceReport {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn max_spectral_radius(&self) -> Option<f64> {
        self.spectral_radius_estimates.iter().copied().reduce(f64::max)
    }
}

fn stall_note(trace: &[f64]) -> Option<String> {
    let (first, last) = (*trace.first()?, *trace.last()?);
    (last > STALL_FLOOR && last > STALL_FRACTION * first).then(|| {
        format!("not converging: last norm difference {last:.3e} vs first {first:.3e}")
    })
}

/// Iterates `h <- F(h; x)` from zero for `steps` steps, recording norm
/// differences. Blow-up truncates the trace at the offending step.
pub fn unroll_convergence<M: RefinementMap + ?Sized>(
    map: &M,
    x: &Tensor,
    steps: usize,
) -> Result<ConvergenceReport> {
    unroll_with_probes(map, x, steps, &[], |_| Ok(()))
}

/// Shared unroll loop; `on_probe` sees the iterate at each step listed in
/// `probe_at` (step 0 is the zero initial state).
fn unroll_with_probes<M: RefinementMap + ?Sized>(
    map: &M,
    x: &Tensor,
    steps: usize,
    probe_at: &[usize],
    mut on_probe: impl FnMut(&Tensor) -> Result<()>,
) -> Result<ConvergenceReport> {
    if steps == 0 {
        return Err(IfrError::config("unroll_convergence needs at least one step"));
    }
    let mut h = Tensor::zeros_like(x);
    let mut trace = Vec::with_capacity(steps);
    let mut probe_steps = Vec::new();
    let mut divergence = None;
    for step in 0..steps {
        if probe_at.contains(&step) {
            on_probe(&h)?;
            probe_steps.push(step);
        }
        let next = match map.apply(&h, x) {
            Ok(n) if n.is_finite() => n,
            Ok(_) | Err(IfrError::NonFinite { .. }) => {
                divergence = Some(format!("non-finite iterate at step {step}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let d = next.sub(&h)?.norm();
        if let Some(&first) = trace.first() {
            if d > GROWTH_LIMIT * f64::max(first, f64::MIN_POSITIVE) {
                divergence = Some(format!("norm difference {d:.3e} at step {step} exceeds growth limit"));
                break;
            }
        }
        trace.push(d);
        h = next;
    }
    if divergence.is_none() {
        if probe_at.contains(&steps) {
            on_probe(&h)?;
            probe_steps.push(steps);
        }
        divergence = stall_note(&trace);
    }
    Ok(ConvergenceReport {
        steps: trace.len(),
        norm_diff_trace: trace,
        probe_steps,
        spectral_radius_estimates: Vec::new(),
        implicit_gap: None,
        divergence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralOptions {
    pub probes: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            probes: 3,
            power_iters: 500,
            seed: 0,
        }
    }
}

fn random_unit(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let mut v = Tensor::zeros(shape);
    v.data_mut().iter_mut().for_each(|e| *e = rng.normal());
    let n = v.norm();
    v.scale(1.0 / n)
}

/// Central-difference Jacobian-vector product of `h -> F(h; x)`.
fn jvp<M: RefinementMap + ?Sized>(map: &M, x: &Tensor, h: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor> {
    let mut plus = h.clone();
    plus.axpy(eps, v);
    let mut minus = h.clone();
    minus.axpy(-eps, v);
    let fp = map.apply(&plus, x)?;
    let fm = map.apply(&minus, x)?;
    Ok(fp.sub(&fm)?.scale(0.5 / eps))
}

/// Power-iteration estimate of the spectral radius of `dF/dh` at `(h, x)`.
///
/// Each probe starts from a random unit vector and iterates `v <- Jv/|Jv|`;
/// its estimate is the geometric mean of the growth ratios over the second
/// half of the iterations, which also handles dominant complex pairs. The
/// result is the maximum over probes.
pub fn spectral_radius<M: RefinementMap + ?Sized>(
    map: &M,
    x: &Tensor,
    h: &Tensor,
    opts: SpectralOptions,
) -> Result<f64> {
    h.ensure_same_shape(x, "spectral_radius")?;
    if opts.probes == 0 || opts.power_iters == 0 {
        return Err(IfrError::config("spectral_radius needs probes >= 1 and power_iters >= 1"));
    }
    let eps = JVP_STEP * h.norm().max(1.0);
    let keep = opts.power_iters.div_ceil(2);
    let mut best = 0.0f64;
    for probe in 0..opts.probes {
        let mut rng = SplitMix64::substream(opts.seed, probe as u64);
        let mut v = random_unit(h.shape(), &mut rng);
        let mut log_ratios = Vec::with_capacity(opts.power_iters);
        let mut reprobes = 0;
        while log_ratios.len() < opts.power_iters {
            let w = jvp(map, x, h, &v, eps)?;
            let g = w.norm();
            if !g.is_finite() {
                return Err(IfrError::NonFinite { op: "spectral_radius" });
            }
            if g <= f64::MIN_POSITIVE {
                // The iterate fell into the null space; start over.
                reprobes += 1;
                if reprobes > MAX_REPROBES {
                    break;
                }
                log_ratios.clear();
                v = random_unit(h.shape(), &mut rng);
                continue;
            }
            log_ratios.push(g.ln());
            v = w.scale(1.0 / g);
        }
        if log_ratios.is_empty() {
            continue;
        }
        let tail = &log_ratios[log_ratios.len().saturating_sub(keep)..];
        let est = (tail.iter().sum::<f64>() / tail.len() as f64).exp();
        best = best.max(est);
    }
    Ok(best)
}

/// Max-abs difference between the root-finder's equilibrium and the
/// `steps`-step unroll.
pub fn implicit_gap<M: RefinementMap + ?Sized>(
    map: &M,
    x: &Tensor,
    cfg: &SolverConfig,
    steps: usize,
) -> Result<f64> {
    let rec = ifr_forward(map, x, cfg)?;
    let (unrolled, _) = unrolled_shared_forward(map, x, steps)?;
    Ok(rec.equilibrium.max_abs_diff(&unrolled))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseOptions {
    pub steps: usize,
    /// Evenly spaced unroll steps (including the final iterate) at which the
    /// spectral radius is probed.
    pub radius_probes: usize,
    pub spectral: SpectralOptions,
    /// `None` skips the implicit-gap measurement.
    pub solver: Option<SolverConfig>,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_UNROLL_STEPS,
            radius_probes: 5,
            spectral: SpectralOptions::default(),
            solver: Some(SolverConfig::default()),
        }
    }
}

/// Unroll trace, spectral radii along the unroll, and the implicit gap.
pub fn convergence_report<M: RefinementMap + ?Sized>(
    map: &M,
    x: &Tensor,
    opts: &DiagnoseOptions,
) -> Result<ConvergenceReport> {
    let probe_at: Vec<usize> = match opts.radius_probes {
        0 => Vec::new(),
        1 => vec![opts.steps],
        k => (0..k).map(|i| i * opts.steps / (k - 1)).collect(),
    };
    let mut radii = Vec::new();
    let mut report = unroll_with_probes(map, x, opts.steps, &probe_at, |h| {
        radii.push(spectral_radius(map, x, h, opts.spectral)?);
        Ok(())
    })?;
    report.spectral_radius_estimates = radii;
    if let Some(cfg) = &opts.solver {
        if report.divergence.is_none() {
            report.implicit_gap = Some(implicit_gap(map, x, cfg, opts.steps)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::implicit::AffineMap;

    #[test]
    fn linear_trace_is_geometric() {
        let map = AffineMap::scalar(0.5);
        let r = unroll_convergence(&map, &Tensor::from_vec(vec![1.0]), 10).unwrap();
        assert_eq!(r.steps, 10);
        for (i, d) in r.norm_diff_trace.iter().enumerate() {
            assert_eq!(*d, 0.5f64.powi(i as i32));
        }
    }

    #[test]
    fn expanding_map_flags_divergence() {
        let map = AffineMap::scalar(1.5);
        let r = unroll_convergence(&map, &Tensor::from_vec(vec![1.0]), 200).unwrap();
        assert!(r.diverged());
        assert_eq!(r.steps, r.norm_diff_trace.len());
        assert!(r.steps < 200);
    }

    #[test]
    fn diagonal_radius() {
        let mut d = vec![0.1; 8];
        d[0] = 0.9;
        let map = AffineMap::diagonal(&d);
        let x = Tensor::zeros(&[8]);
        let est = spectral_radius(&map, &x, &x, SpectralOptions::default()).unwrap();
        assert!((est - 0.9).abs() < 1e-3, "{est}");
    }

    #[test]
    fn zero_map_has_zero_radius() {
        let map = AffineMap::diagonal(&[0.0; 4]);
        let x = Tensor::zeros(&[4]);
        assert_eq!(spectral_radius(&map, &x, &x, SpectralOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn linear_gap_is_tiny() {
        let map = AffineMap::scalar(0.5);
        let gap = implicit_gap(&map, &Tensor::from_vec(vec![1.0]), &SolverConfig::default(), 200).unwrap();
        assert!(gap < 1e-12);
    }

    #[test]
    fn report_probes_along_the_unroll() {
        let map = AffineMap::diagonal(&[0.5, 0.2]);
        let opts = DiagnoseOptions {
            steps: 100,
            radius_probes: 3,
            ..DiagnoseOptions::default()
        };
        let r = convergence_report(&map, &Tensor::from_vec(vec![1.0, 1.0]), &opts).unwrap();
        assert_eq!(r.probe_steps, vec![0, 50, 100]);
        assert_eq!(r.spectral_radius_estimates.len(), 3);
        assert!(r.max_spectral_radius().unwrap() < 0.51);
        assert!(r.implicit_gap.unwrap() < 1e-12);
        assert!(!r.diverged());
    }
}
