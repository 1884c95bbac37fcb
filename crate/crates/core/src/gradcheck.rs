//! Checks implicit gradients of small random contractive blocks against two
//! independent references: central finite differences through the full
//! forward solve, and backpropagation through a long unroll.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    unrolled_shared_vjp, BlockSpec, DoubleResidualParams, ParamSet, RefinementMap,
};
use crate::diagnostics::{spectral_radius, SpectralOptions};
use crate::error::{IfrError, Result};
use crate::implicit::{ifr_backward, ifr_forward};
use crate::rng::SplitMix64;
use crate::solver::SolverConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub channels: usize,
    /// Spatial side of the square feature map.
    pub side: usize,
    /// Parameter coordinates compared against finite differences per trial.
    pub param_coords: usize,
    /// Input coordinates compared against finite differences per trial.
    pub input_coords: usize,
    pub fd_eps: f64,
    pub unroll_steps: usize,
    /// Blocks whose spectral radius at the equilibrium exceeds this are
    /// redrawn.
    pub max_radius: f64,
    /// Output-norm scale applied to freshly initialised blocks.
    pub output_scale: f64,
    pub solver: SolverConfig,
    /// Negative control: scale the hidden-state VJP by this factor.
    #[serde(skip)]
    pub vjp_distortion: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            channels: 8,
            side: 6,
            param_coords: 24,
            input_coords: 12,
            fd_eps: 1e-5,
            unroll_steps: 200,
            max_radius: 0.9,
            output_scale: 1.0,
            solver: SolverConfig {
                max_iters: 100,
                rel_tol: 1e-13,
                ..SolverConfig::default()
            },
            vjp_distortion: None,
        }
    }
}

impl GradCheckOptions {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(IfrError::config("grad-check needs at least one trial"));
        }
        if self.channels == 0 || self.side == 0 {
            return Err(IfrError::config("grad-check block dimensions must be positive"));
        }
        if !(self.max_radius > 0.0 && self.max_radius < 1.0) {
            return Err(IfrError::config("max_radius must lie in (0, 1)"));
        }
        if !(self.fd_eps > 0.0) {
            return Err(IfrError::config("fd_eps must be positive"));
        }
        if self.unroll_steps == 0 {
            return Err(IfrError::config("unroll_steps must be at least 1"));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trial: usize,
    pub spectral_radius: f64,
    /// `|implicit - fd| / |fd|` over the sampled parameter coordinates.
    pub fd_param_rel: f64,
    pub fd_input_rel: f64,
    /// `|implicit - unroll| / |unroll|` over all parameters.
    pub unroll_param_rel: f64,
    pub unroll_input_rel: f64,
    pub forward_converged: bool,
    pub adjoint_converged: bool,
}

impl TrialReport {
    pub fn fd_rel(&self) -> f64 {
        self.fd_param_rel.max(self.fd_input_rel)
    }

    pub fn unroll_rel(&self) -> f64 {
        self.unroll_param_rel.max(self.unroll_input_rel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub trials: Vec<TrialReport>,
}

impl GradCheckReport {
    pub fn max_fd_rel(&self) -> f64 {
        self.trials.iter().map(TrialReport::fd_rel).fold(0.0, f64::max)
    }

    pub fn max_unroll_rel(&self) -> f64 {
        self.trials.iter().map(TrialReport::unroll_rel).fold(0.0, f64::max)
    }
}

/// Wraps a map and scales its hidden-state VJP, leaving everything else
/// intact.
#[derive(Debug, Clone)]
pub struct DistortedVjp<'a, M> {
    pub inner: &'a M,
    pub factor: f64,
}

impl<M: RefinementMap> RefinementMap for DistortedVjp<'_, M> {
    type Tape = M::Tape;
    type Grads = M::Grads;

    fn apply(&self, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.inner.apply(h, x)
    }

    fn record(&self, h: &Tensor, x: &Tensor) -> Result<(Tensor, M::Tape)> {
        self.inner.record(h, x)
    }

    fn vjp_hidden(&self, tape: &M::Tape, cotangent: &Tensor) -> Result<Tensor> {
        Ok(self.inner.vjp_hidden(tape, cotangent)?.scale(self.factor))
    }

    fn vjp_all(&self, tape: &M::Tape, cotangent: &Tensor) -> Result<(Tensor, Tensor, M::Grads)> {
        self.inner.vjp_all(tape, cotangent)
    }

    fn zero_grads(&self) -> M::Grads {
        self.inner.zero_grads()
    }

    fn accumulate(acc: &mut M::Grads, g: &M::Grads) {
        M::accumulate(acc, g)
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
    t
}

/// A randomly initialised block with perturbed norm affines and biases, and
/// its output norm scaled by `output_scale`.
pub fn random_block(
    channels: usize,
    output_scale: f64,
    rng: &mut SplitMix64,
) -> Result<DoubleResidualParams> {
    let spec = BlockSpec::new(channels, channels);
    let mut p = DoubleResidualParams::init(&spec, rng)?;
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        if name.ends_with(".bias") || name.ends_with(".shift") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        } else if name.ends_with(".scale") || name.ends_with(".gain") {
            t.data_mut().iter_mut().for_each(|v| *v *= 1.0 + 0.1 * rng.normal());
        }
    }
    if let Some(gn3) = &mut p.output_norm {
        gn3.scale = gn3.scale.scale(output_scale);
    }
    Ok(p)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

fn flat(p: &DoubleResidualParams) -> Vec<f64> {
    p.named_tensors().into_iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

/// `<w, H*(p, x)>` with a tight forward solve.
fn objective(p: &DoubleResidualParams, x: &Tensor, w: &Tensor, cfg: &SolverConfig) -> Result<f64> {
    let rec = ifr_forward(p, x, cfg)?;
    if !rec.converged() {
        return Err(IfrError::Divergence {
            step: rec.forward_result.iterations_used,
            detail: "finite-difference forward solve did not converge".into(),
        });
    }
    Ok(rec.equilibrium.dot(w))
}

fn run_trial(opts: &GradCheckOptions, trial: usize) -> Result<TrialReport> {
    let mut rng = SplitMix64::substream(opts.seed, trial as u64);
    let shape = [opts.channels, opts.side, opts.side];
    const MAX_DRAWS: usize = 50;
    let mut drawn = None;
    for _ in 0..MAX_DRAWS {
        let p = random_block(opts.channels, opts.output_scale, &mut rng)?;
        let x = normal_tensor(&shape, 1.0, &mut rng);
        let rec = ifr_forward(&p, &x, &opts.solver)?;
        if !rec.converged() {
            continue;
        }
        let rho = spectral_radius(&p, &x, &rec.equilibrium, SpectralOptions::default())?;
        if rho <= opts.max_radius {
            drawn = Some((p, x, rho));
            break;
        }
    }
    let (p, x, rho) = drawn.ok_or_else(|| {
        IfrError::config(format!(
            "no block with spectral radius <= {} in {MAX_DRAWS} draws",
            opts.max_radius
        ))
    })?;
    let w = normal_tensor(&shape, 1.0, &mut rng);

    let rec = ifr_forward(&p, &x, &opts.solver)?;
    let implicit = match opts.vjp_distortion {
        None => ifr_backward(&rec, &w, &opts.solver)?,
        Some(factor) => {
            let distorted = DistortedVjp { inner: &p, factor };
            let drec = ifr_forward(&distorted, &x, &opts.solver)?;
            ifr_backward(&drec, &w, &opts.solver)?
        }
    };
    let implicit_params = flat(&implicit.params);

    // Finite differences on a random subset of coordinates.
    let n_params = implicit_params.len();
    let mut fd_p = Vec::new();
    let mut im_p = Vec::new();
    for _ in 0..opts.param_coords.min(n_params) {
        let k = rng.below(n_params);
        let mut q = p.clone();
        let slot = locate(&mut q, k);
        let orig = *slot;
        *slot = orig + opts.fd_eps;
        let up = objective(&q, &x, &w, &opts.solver)?;
        *locate(&mut q, k) = orig - opts.fd_eps;
        let down = objective(&q, &x, &w, &opts.solver)?;
        fd_p.push((up - down) / (2.0 * opts.fd_eps));
        im_p.push(implicit_params[k]);
    }
    let mut fd_x = Vec::new();
    let mut im_x = Vec::new();
    for _ in 0..opts.input_coords.min(x.len()) {
        let k = rng.below(x.len());
        let mut xp = x.clone();
        xp.data_mut()[k] += opts.fd_eps;
        let up = objective(&p, &xp, &w, &opts.solver)?;
        xp.data_mut()[k] -= 2.0 * opts.fd_eps;
        let down = objective(&p, &xp, &w, &opts.solver)?;
        fd_x.push((up - down) / (2.0 * opts.fd_eps));
        im_x.push(implicit.input.data()[k]);
    }

    let (_, unroll_dx, unroll_dp) = unrolled_shared_vjp(&p, &x, opts.unroll_steps, &w)?;

    Ok(TrialReport {
        trial,
        spectral_radius: rho,
        fd_param_rel: rel_err(&im_p, &fd_p),
        fd_input_rel: rel_err(&im_x, &fd_x),
        unroll_param_rel: rel_err(&implicit_params, &flat(&unroll_dp)),
        unroll_input_rel: rel_err(implicit.input.data(), unroll_dx.data()),
        forward_converged: rec.converged(),
        adjoint_converged: implicit.converged(),
    })
}

/// Mutable reference to flattened parameter coordinate `k`.
fn locate(p: &mut DoubleResidualParams, mut k: usize) -> &mut f64 {
    for t in p.tensors_mut() {
        if k < t.len() {
            return &mut t.data_mut()[k];
        }
        k -= t.len();
    }
    panic!("parameter coordinate out of range");
}

pub fn grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    opts.validate()?;
    let trials = (0..opts.trials)
        .map(|t| run_trial(opts, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { trials })
}
