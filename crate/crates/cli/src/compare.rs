//! Strategy comparison grid: every cell trains on the same dataset with the
//! same seed, so differences come from the head alone.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Result;
use ifr_core::blocks::{count_parameters, HeadConfig, Strategy};
use ifr_core::data::{save_container, Dataset};
use ifr_core::solver::SolverConfig;
use ifr_core::training::{evaluate, held_out_samples, train, EvalMetrics, HeadModel, HeadParams, TrainConfig};

use crate::commands::{checkpoint_tensors, default_depth, load_dataset};
use crate::config::{ExperimentConfig, Workspace};
use crate::error::CliError;
use crate::report::{num, opt_num, CsvTable};

pub const COMPARE_FILE: &str = "compare.csv";
pub const THREADS_ENV: &str = "IFR_THREADS";
/// Stacked convolutions without residual paths or output norm.
pub const PLAIN_CONV: &str = "plain-conv";

pub const COMPARE_COLUMNS: &[&str] = &[
    "cell",
    "label",
    "strategy",
    "depth_or_budget",
    "double_residual",
    "params",
    "param_ratio",
    "coco_params",
    "coco_param_ratio",
    "final_loss",
    "held_out_iou",
    "pixel_accuracy",
    "solver_converged_frac",
    "status",
    "error",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub label: String,
    pub head: HeadConfig,
}

/// Expands `name[:depth]` entries into cells.
///
/// `name` is a strategy or `plain-conv`. Implicit entries without a depth get
/// one cell per budget; other entries without a depth use the strategy's
/// default. Every non-plain entry is repeated for each double-residual
/// setting in `double_residual`.
pub fn parse_cells(
    base: &HeadConfig,
    strategies: &[String],
    budgets: &[usize],
    double_residual: &[bool],
) -> Result<Vec<CellSpec>> {
    let dr_settings = if double_residual.is_empty() {
        vec![base.double_residual]
    } else {
        double_residual.to_vec()
    };
    let entries: Vec<String> = if strategies.is_empty() {
        vec![format!("{}:{}", base.strategy, base.depth_or_budget)]
    } else {
        strategies.to_vec()
    };
    let mut cells = Vec::new();
    for entry in &entries {
        let (name, depth) = match entry.split_once(':') {
            Some((n, d)) => {
                let d: usize = d
                    .trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("bad depth in '{entry}'")))?;
                (n.trim(), Some(d))
            }
            None => (entry.trim(), None),
        };
        if name == PLAIN_CONV {
            let depth = depth.ok_or_else(|| CliError::config("plain-conv needs a depth, e.g. plain-conv:2"))?;
            let head = HeadConfig {
                strategy: Strategy::ExplicitIndependent,
                depth_or_budget: depth,
                double_residual: false,
                output_norm: false,
                ..base.clone()
            };
            head.validate()?;
            cells.push(CellSpec {
                label: format!("{PLAIN_CONV}:{depth}"),
                head,
            });
            continue;
        }
        let strategy: Strategy = name.parse()?;
        let depths = match (depth, strategy) {
            (Some(d), _) => vec![d],
            (None, Strategy::ImplicitBroyden) if !budgets.is_empty() => budgets.to_vec(),
            (None, s) => vec![default_depth(s)],
        };
        for &d in &depths {
            for &dr in &dr_settings {
                let head = HeadConfig {
                    strategy,
                    depth_or_budget: d,
                    double_residual: dr,
                    ..base.clone()
                };
                head.validate()?;
                let suffix = if dr { "" } else { "/no-dr" };
                cells.push(CellSpec {
                    label: format!("{strategy}:{d}{suffix}"),
                    head,
                });
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub params: HeadParams,
    /// Mean batch loss of the last logging window; `None` for a zero-length run.
    pub final_loss: Option<f64>,
    pub eval: EvalMetrics,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub index: usize,
    pub spec: CellSpec,
    pub outcome: std::result::Result<CellRun, String>,
}

impl CellResult {
    pub fn iou(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| r.eval.mean_iou)
    }
}

fn run_cell(spec: &CellSpec, dataset: &Dataset, train_cfg: &TrainConfig, solver: &SolverConfig) -> Result<CellRun> {
    let model = HeadModel::new(spec.head.clone(), solver.clone())?;
    let (state, log) = train(&model, train_cfg, dataset)?;
    let eval = evaluate(&model, &state.params, held_out_samples(dataset))?;
    Ok(CellRun {
        params: state.params,
        final_loss: log.last().map(|r| r.loss),
        eval,
    })
}

/// Concurrency from `IFR_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")).into()),
        },
    }
}

/// Trains every cell; failures are kept per cell. Results are ordered by
/// cell index whatever the thread count.
pub fn run_cells(
    cells: &[CellSpec],
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    solver: &SolverConfig,
    threads: usize,
) -> Vec<CellResult> {
    let run = |index: usize| CellResult {
        index,
        spec: cells[index].clone(),
        outcome: run_cell(&cells[index], dataset, train_cfg, solver).map_err(|e| format!("{e:#}")),
    };
    if threads <= 1 || cells.len() <= 1 {
        return (0..cells.len()).map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let r = run(i);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

fn coco_like(head: &HeadConfig) -> HeadConfig {
    HeadConfig {
        channels: 256,
        predictor_classes: 80,
        weight_norm: false,
        ..head.clone()
    }
}

/// Total parameters and the ratio to a four-stage explicit head of the same
/// width.
fn counts(head: &HeadConfig) -> Result<(usize, f64)> {
    let total = count_parameters(head)?.total;
    let reference = count_parameters(&HeadConfig {
        strategy: Strategy::ExplicitIndependent,
        depth_or_budget: 4,
        ..head.clone()
    })?
    .total;
    Ok((total, total as f64 / reference as f64))
}

pub fn compare_table(results: &[CellResult]) -> Result<CsvTable> {
    let mut t = CsvTable::new("compare", 1, COMPARE_COLUMNS);
    for r in results {
        let h = &r.spec.head;
        let (params, ratio) = counts(h)?;
        let (coco, coco_ratio) = counts(&coco_like(h))?;
        let mut row = vec![
            r.index.to_string(),
            r.spec.label.clone(),
            h.strategy.to_string(),
            h.depth_or_budget.to_string(),
            h.double_residual.to_string(),
            params.to_string(),
            num(ratio),
            coco.to_string(),
            num(coco_ratio),
        ];
        match &r.outcome {
            Ok(run) => row.extend([
                opt_num(run.final_loss),
                num(run.eval.mean_iou),
                num(run.eval.pixel_accuracy),
                opt_num(run.eval.converged_fraction),
                "ok".into(),
                String::new(),
            ]),
            Err(msg) => row.extend([
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "failed".into(),
                msg.clone(),
            ]),
        }
        t.push(row);
    }
    Ok(t)
}

pub struct CompareRequest<'a> {
    pub strategies: &'a [String],
    pub budgets: &'a [usize],
    pub double_residual: &'a [bool],
    pub save_checkpoints: bool,
}

pub fn compare_command(cfg: &ExperimentConfig, ws: &Workspace, req: &CompareRequest<'_>) -> Result<Vec<CellResult>> {
    let cells = parse_cells(&cfg.head, req.strategies, req.budgets, req.double_residual)?;
    let threads = threads_from_env()?;
    let dataset = load_dataset(cfg, ws)?;
    ws.prepare()?;
    let results = run_cells(&cells, &dataset, &cfg.train, &cfg.solver, threads);
    compare_table(&results)?.write(&ws.resolve(Path::new(COMPARE_FILE)))?;
    if req.save_checkpoints {
        for r in &results {
            if let Ok(run) = &r.outcome {
                let model = HeadModel::new(r.spec.head.clone(), cfg.solver.clone())?;
                let name = format!("cell{}.ifr", r.index);
                save_container(&ws.resolve(Path::new(&name)), &checkpoint_tensors(cfg, &model, &run.params)?)?;
            }
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> HeadConfig {
        HeadConfig::toy(Strategy::ImplicitBroyden, 15)
    }

    fn labels(cells: &[CellSpec]) -> Vec<&str> {
        cells.iter().map(|c| c.label.as_str()).collect()
    }

    #[test]
    fn budgets_expand_implicit_entries_only() {
        let s: Vec<String> = ["explicit:4", "unrolled", "implicit"].map(String::from).to_vec();
        let cells = parse_cells(&base(), &s, &[3, 20], &[]).unwrap();
        assert_eq!(
            labels(&cells),
            ["explicit-independent:4", "unrolled-shared:4", "implicit-broyden:3", "implicit-broyden:20"]
        );
    }

    #[test]
    fn double_residual_settings_and_plain_preset() {
        let s: Vec<String> = ["implicit:15", "plain-conv:2"].map(String::from).to_vec();
        let cells = parse_cells(&base(), &s, &[], &[true, false]).unwrap();
        assert_eq!(labels(&cells), ["implicit-broyden:15", "implicit-broyden:15/no-dr", "plain-conv:2"]);
        assert!(!cells[1].head.double_residual);
        let plain = &cells[2].head;
        assert_eq!(plain.strategy, Strategy::ExplicitIndependent);
        assert!(!plain.double_residual && !plain.output_norm);
    }

    #[test]
    fn default_cell_is_the_config_head() {
        let cells = parse_cells(&base(), &[], &[], &[]).unwrap();
        assert_eq!(labels(&cells), ["implicit-broyden:15"]);
        assert_eq!(cells[0].head, base());
    }

    #[test]
    fn bad_entries_are_rejected() {
        for bad in ["bogus", "explicit:x", "plain-conv", "unrolled:0"] {
            assert!(parse_cells(&base(), &[bad.to_string()], &[], &[]).is_err(), "{bad}");
        }
    }

    #[test]
    fn toy_and_coco_ratios_stay_under_three_tenths() {
        let (_, toy) = counts(&base()).unwrap();
        let (_, coco) = counts(&coco_like(&base())).unwrap();
        assert!(toy < 0.30, "{toy}");
        assert!(coco < 0.30, "{coco}");
    }
}
