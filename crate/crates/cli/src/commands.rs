use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ifr_core::blocks::{
    count_parameters_with, ChannelMultiplier, CountOptions, CountProfile, ParameterCount, Strategy,
};
use ifr_core::data::{encode_container, generate, load_container, save_container, Dataset, NamedTensors};
use ifr_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use ifr_core::training::{
    evaluate, held_out_samples, text_tensor, to_checkpoint, train, EvalMetrics, HeadModel, HeadParams,
    MetricsRow,
};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Workspace};
use crate::error::CliError;
use crate::report::{num, opt_num, CsvTable};

pub const CHECKPOINT_FILE: &str = "checkpoint.ifr";
pub const TRAIN_METRICS_FILE: &str = "train_metrics.csv";
pub const GRAD_CHECK_FILE: &str = "grad_check.csv";
/// Checkpoint entry holding the generating dataset spec as JSON bytes.
pub const DATA_SPEC_KEY: &str = "meta.data_spec";

pub const TRAIN_COLUMNS: &[&str] = &["iter", "lr", "loss", "held_out_iou", "solver_converged_frac"];

/// Limits for the gradient check: against finite differences and against
/// unrolled backpropagation.
pub const GRAD_CHECK_FD_LIMIT: f64 = 1e-4;
pub const GRAD_CHECK_UNROLL_LIMIT: f64 = 1e-3;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct GenDataOutcome {
    pub path: PathBuf,
    pub count: usize,
    pub checksum: String,
}

pub fn gen_data(cfg: &ExperimentConfig, ws: &Workspace, out: &Path) -> Result<GenDataOutcome> {
    let dataset = generate(&cfg.data)?;
    let bytes = encode_container(&dataset.to_tensors()?)?;
    let path = ws.resolve(out);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(GenDataOutcome {
        path,
        count: dataset.samples.len(),
        checksum: sha256_hex(&bytes),
    })
}

/// The configured dataset container, or a freshly generated one.
pub fn load_dataset(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Dataset> {
    let dataset = match &cfg.dataset {
        Some(p) => {
            let path = ws.resolve(p);
            if !path.is_file() {
                return Err(CliError::DatasetNotFound(path).into());
            }
            let tensors = load_container(&path).with_context(|| format!("loading dataset {}", path.display()))?;
            Dataset::from_tensors(&tensors).with_context(|| format!("decoding dataset {}", path.display()))?
        }
        None => generate(&cfg.data)?,
    };
    if dataset.channels() != cfg.head.channels {
        return Err(CliError::config(format!(
            "dataset has {} channels, head expects {}",
            dataset.channels(),
            cfg.head.channels
        ))
        .into());
    }
    Ok(dataset)
}

pub fn metrics_table(rows: &[MetricsRow]) -> CsvTable {
    let mut t = CsvTable::new("train", 1, TRAIN_COLUMNS);
    for r in rows {
        t.push(vec![
            r.iter.to_string(),
            num(r.lr),
            num(r.loss),
            num(r.held_out_iou),
            opt_num(r.solver_converged_frac),
        ]);
    }
    t
}

/// Checkpoint tensors plus the dataset spec when the data was generated.
pub fn checkpoint_tensors(
    cfg: &ExperimentConfig,
    model: &HeadModel,
    params: &HeadParams,
) -> Result<NamedTensors> {
    let mut tensors = to_checkpoint(model, params)?;
    if cfg.dataset.is_none() {
        tensors.push((DATA_SPEC_KEY.into(), text_tensor(&serde_json::to_string(&cfg.data)?)));
    }
    Ok(tensors)
}

pub struct TrainOutcome {
    pub params: HeadParams,
    pub model: HeadModel,
    pub log: Vec<MetricsRow>,
    pub final_eval: EvalMetrics,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

pub fn train_command(cfg: &ExperimentConfig, ws: &Workspace) -> Result<TrainOutcome> {
    let dataset = load_dataset(cfg, ws)?;
    ws.prepare()?;
    let model = HeadModel::new(cfg.head.clone(), cfg.solver.clone())?;
    let (state, log) = train(&model, &cfg.train, &dataset).context("training")?;
    let final_eval = evaluate(&model, &state.params, held_out_samples(&dataset))?;

    let metrics_csv = ws.resolve(Path::new(TRAIN_METRICS_FILE));
    metrics_table(&log).write(&metrics_csv)?;
    let checkpoint = ws.resolve(Path::new(CHECKPOINT_FILE));
    save_container(&checkpoint, &checkpoint_tensors(cfg, &model, &state.params)?)?;
    Ok(TrainOutcome {
        params: state.params,
        model,
        log,
        final_eval,
        checkpoint,
        metrics_csv,
    })
}

/// Default depth when none is given: four stages, or a 15-step solve.
pub fn default_depth(strategy: Strategy) -> usize {
    match strategy {
        Strategy::ImplicitBroyden => 15,
        _ => 4,
    }
}

pub struct ParamCountLine {
    pub profile: CountProfile,
    pub strategy: Strategy,
    pub depth: usize,
    pub multiplier: ChannelMultiplier,
    pub count: ParameterCount,
}

impl std::fmt::Display for ParamCountLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} depth={} multiplier={}: {} parameters ({:.1} M)",
            self.profile,
            self.strategy,
            self.depth,
            self.multiplier,
            self.count.total,
            self.count.millions_rounded()
        )
    }
}

pub fn param_count(
    profile: CountProfile,
    strategy: Strategy,
    depth: Option<usize>,
    multipliers: &[ChannelMultiplier],
    opts: CountOptions,
) -> Result<Vec<ParamCountLine>> {
    let depth = depth.unwrap_or_else(|| default_depth(strategy));
    multipliers
        .iter()
        .map(|&m| {
            let cfg = profile.head_config(strategy, depth, m);
            Ok(ParamCountLine {
                profile,
                strategy,
                depth,
                multiplier: m,
                count: count_parameters_with(&cfg, opts)?,
            })
        })
        .collect()
}

pub const GRAD_CHECK_COLUMNS: &[&str] = &[
    "trial",
    "spectral_radius",
    "fd_param_rel",
    "fd_input_rel",
    "unroll_param_rel",
    "unroll_input_rel",
    "forward_converged",
    "adjoint_converged",
];

pub fn grad_check_table(report: &GradCheckReport) -> CsvTable {
    let mut t = CsvTable::new("grad-check", 1, GRAD_CHECK_COLUMNS);
    for r in &report.trials {
        t.push(vec![
            r.trial.to_string(),
            num(r.spectral_radius),
            num(r.fd_param_rel),
            num(r.fd_input_rel),
            num(r.unroll_param_rel),
            num(r.unroll_input_rel),
            r.forward_converged.to_string(),
            r.adjoint_converged.to_string(),
        ]);
    }
    t
}

/// Runs the check, writes its CSV, and fails when either limit is exceeded.
pub fn grad_check_command(opts: &GradCheckOptions, ws: &Workspace) -> Result<GradCheckReport> {
    let report = grad_check(opts)?;
    ws.prepare()?;
    grad_check_table(&report).write(&ws.resolve(Path::new(GRAD_CHECK_FILE)))?;
    let (fd, unroll) = (report.max_fd_rel(), report.max_unroll_rel());
    if !(fd <= GRAD_CHECK_FD_LIMIT && unroll <= GRAD_CHECK_UNROLL_LIMIT) {
        return Err(CliError::CheckFailed(format!(
            "max relative error {fd:.3e} vs finite differences (limit {GRAD_CHECK_FD_LIMIT:e}), \
             {unroll:.3e} vs unrolled backprop (limit {GRAD_CHECK_UNROLL_LIMIT:e})"
        ))
        .into());
    }
    Ok(report)
}
