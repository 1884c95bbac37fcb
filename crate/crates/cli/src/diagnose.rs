//! Convergence diagnostics for a trained weight-tied block on fresh inputs.

use std::path::Path;

use anyhow::{Context, Result};
use ifr_core::blocks::RefinementMap;
use ifr_core::data::{find, generate, load_container, DatasetSpec};
use ifr_core::diagnostics::{convergence_report, ConvergenceReport, DiagnoseOptions, SpectralOptions};
use ifr_core::implicit::AffineMap;
use ifr_core::solver::SolverConfig;
use ifr_core::training::{from_checkpoint, tensor_text};
use ifr_core::Tensor;

use crate::commands::DATA_SPEC_KEY;
use crate::config::Workspace;
use crate::error::CliError;
use crate::report::{num, opt_num, CsvTable};

pub const SUMMARY_FILE: &str = "diagnose.csv";
pub const TRACE_FILE: &str = "diagnose_trace.csv";
/// Relative tolerance for the solve behind the implicit gap, so the gap
/// measures the solver rather than its stopping rule.
pub const GAP_REL_TOL: f64 = 1e-10;

pub const SUMMARY_COLUMNS: &[&str] = &[
    "input",
    "steps",
    "final_norm_diff",
    "spectral_radius",
    "max_probe_spectral_radius",
    "implicit_gap",
    "divergence",
];
pub const TRACE_COLUMNS: &[&str] = &["input", "step", "norm_diff", "spectral_radius"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnoseProfile {
    /// The block stored in a checkpoint.
    Checkpoint,
    /// `h <- 0.5 h + x` in one dimension with `x = 1`.
    Linear,
}

impl std::str::FromStr for DiagnoseProfile {
    type Err = CliError;

    fn from_str(s: &str) -> std::result::Result<Self, CliError> {
        match s {
            "checkpoint" => Ok(DiagnoseProfile::Checkpoint),
            "linear" => Ok(DiagnoseProfile::Linear),
            other => Err(CliError::config(format!(
                "unknown diagnose profile '{other}' (expected checkpoint or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiagnoseRequest {
    pub profile: DiagnoseProfile,
    pub checkpoint: Option<std::path::PathBuf>,
    pub steps: usize,
    pub inputs: usize,
    /// Seed for the fresh inputs.
    pub seed: u64,
    pub radius_probes: usize,
}

#[derive(Debug, Clone)]
pub struct DiagnoseOutcome {
    pub reports: Vec<ConvergenceReport>,
}

impl DiagnoseOutcome {
    /// Largest estimate at the last unrolled iterate over all inputs.
    pub fn max_final_radius(&self) -> Option<f64> {
        self.reports
            .iter()
            .filter_map(final_radius)
            .reduce(f64::max)
    }

    pub fn annotations(&self) -> Vec<String> {
        self.reports
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.divergence.as_ref().map(|d| format!("input {i}: {d}")))
            .collect()
    }
}

/// The estimate taken at the last unrolled iterate, if the unroll got there.
fn final_radius(r: &ConvergenceReport) -> Option<f64> {
    match r.probe_steps.last() {
        Some(&s) if s == r.steps => r.spectral_radius_estimates.last().copied(),
        _ => None,
    }
}

fn run_reports<M: RefinementMap + ?Sized>(
    map: &M,
    inputs: &[Tensor],
    opts: &DiagnoseOptions,
) -> Result<Vec<ConvergenceReport>> {
    inputs
        .iter()
        .map(|x| convergence_report(map, x, opts).map_err(Into::into))
        .collect()
}

pub fn diagnose(req: &DiagnoseRequest, ws: &Workspace) -> Result<DiagnoseOutcome> {
    if req.steps == 0 {
        return Err(CliError::config("--steps must be at least 1").into());
    }
    if req.inputs == 0 {
        return Err(CliError::config("--inputs must be at least 1").into());
    }
    let mut opts = DiagnoseOptions {
        steps: req.steps,
        radius_probes: req.radius_probes,
        spectral: SpectralOptions {
            seed: req.seed,
            ..SpectralOptions::default()
        },
        solver: None,
    };
    let reports = match req.profile {
        DiagnoseProfile::Linear => {
            opts.solver = Some(SolverConfig {
                rel_tol: GAP_REL_TOL,
                ..SolverConfig::default()
            });
            let x = Tensor::from_vec(vec![1.0]);
            run_reports(&AffineMap::scalar(0.5), &vec![x; req.inputs], &opts)?
        }
        DiagnoseProfile::Checkpoint => {
            let path = ws.resolve(
                req.checkpoint
                    .as_deref()
                    .ok_or_else(|| CliError::config("--checkpoint is required for the checkpoint profile"))?,
            );
            let tensors = load_container(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let (model, params) =
                from_checkpoint(&tensors).with_context(|| format!("decoding checkpoint {}", path.display()))?;
            if !model.config.strategy.is_weight_tied() {
                return Err(CliError::config(format!(
                    "diagnose needs a weight-tied head, the checkpoint holds {}",
                    model.config.strategy
                ))
                .into());
            }
            let mut spec = match find(&tensors, DATA_SPEC_KEY) {
                Ok(t) => serde_json::from_str(&tensor_text(t)?).context("checkpoint data spec")?,
                Err(_) => DatasetSpec {
                    channels: model.config.channels,
                    ..DatasetSpec::new(0, 1)
                },
            };
            spec.seed = req.seed;
            spec.count = req.inputs;
            spec.held_out = Some(0);
            let inputs: Vec<Tensor> = generate(&spec)?.samples.into_iter().map(|s| s.feature).collect();
            let solver = model.effective_solver();
            opts.solver = Some(SolverConfig {
                rel_tol: solver.rel_tol.min(GAP_REL_TOL),
                ..solver
            });
            run_reports(&params.stages[0], &inputs, &opts)?
        }
    };
    let outcome = DiagnoseOutcome { reports };
    ws.prepare()?;
    summary_table(&outcome).write(&ws.resolve(Path::new(SUMMARY_FILE)))?;
    trace_table(&outcome).write(&ws.resolve(Path::new(TRACE_FILE)))?;
    Ok(outcome)
}

pub fn summary_table(o: &DiagnoseOutcome) -> CsvTable {
    let mut t = CsvTable::new("diagnose", 1, SUMMARY_COLUMNS);
    for (i, r) in o.reports.iter().enumerate() {
        t.push(vec![
            i.to_string(),
            r.steps.to_string(),
            opt_num(r.norm_diff_trace.last().copied()),
            opt_num(final_radius(r)),
            opt_num(r.max_spectral_radius()),
            opt_num(r.implicit_gap),
            r.divergence.clone().unwrap_or_default(),
        ]);
    }
    t
}

pub fn trace_table(o: &DiagnoseOutcome) -> CsvTable {
    let mut t = CsvTable::new("diagnose-trace", 1, TRACE_COLUMNS);
    for (i, r) in o.reports.iter().enumerate() {
        let radius_at = |step: usize| {
            r.probe_steps
                .iter()
                .position(|&s| s == step)
                .map(|k| r.spectral_radius_estimates[k])
        };
        for (step, d) in r.norm_diff_trace.iter().enumerate() {
            t.push(vec![i.to_string(), step.to_string(), num(*d), opt_num(radius_at(step))]);
        }
        if let Some(rho) = radius_at(r.steps).filter(|_| r.steps > 0) {
            t.push(vec![i.to_string(), r.steps.to_string(), String::new(), num(rho)]);
        }
    }
    t
}
