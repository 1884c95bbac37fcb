use crate::blocks::{axpy_params, params_finite, params_norm, scale_params};
use crate::data::{Dataset, Sample};
use crate::error::{IfrError, Result};
use crate::rng::SplitMix64;

use super::loss::{bce_mask_loss, mask_iou, pixel_accuracy};
use super::model::{HeadModel, HeadParams};
use super::schedule::{lr_at, TrainConfig};

/// Fraction of diverged forward solves in a logging window above which
/// training stops.
pub const ABORT_DIVERGED_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: HeadParams,
    /// Momentum buffers, shaped like `params`.
    pub momentum: HeadParams,
    pub iteration: usize,
    /// Mean batch loss of every completed iteration.
    pub loss_history: Vec<f64>,
    /// Converged fraction of forward solves per logging window (implicit
    /// heads only).
    pub solver_health: Vec<f64>,
    /// Updates dropped because the gradient was not finite.
    pub skipped_steps: usize,
}

impl TrainState {
    pub fn new(params: HeadParams) -> Self {
        Self {
            momentum: params.zeros_like(),
            params,
            iteration: 0,
            loss_history: Vec::new(),
            solver_health: Vec::new(),
            skipped_steps: 0,
        }
    }
}

/// Classical momentum: `buf <- momentum * buf + grad`, `param <- param - lr * buf`.
/// A non-finite gradient leaves the state untouched and returns `false`.
pub fn sgd_step(state: &mut TrainState, grads: &HeadParams, lr: f64, momentum: f64) -> bool {
    if !params_finite(grads) {
        state.skipped_steps += 1;
        return false;
    }
    scale_params(&mut state.momentum, momentum);
    axpy_params(&mut state.momentum, 1.0, grads);
    axpy_params(&mut state.params, -lr, &state.momentum);
    state.params.enforce_constraints();
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Mean over samples of the IoU of `logits > 0` against the mask.
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub mean_loss: f64,
    /// `None` for heads without a solver.
    pub converged_fraction: Option<f64>,
}

pub fn evaluate(model: &HeadModel, params: &HeadParams, samples: &[Sample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(IfrError::config("cannot evaluate on an empty sample set"));
    }
    let (mut iou, mut acc, mut loss) = (0.0, 0.0, 0.0);
    let (mut solves, mut converged) = (0usize, 0usize);
    for s in samples {
        let (logits, status) = model.predict(params, &s.feature)?;
        iou += mask_iou(&logits, &s.mask)?;
        acc += pixel_accuracy(&logits, &s.mask)?;
        loss += bce_mask_loss(&logits, &s.mask)?.0;
        if let Some(c) = status.converged {
            solves += 1;
            converged += usize::from(c);
        }
    }
    let n = samples.len() as f64;
    Ok(EvalMetrics {
        mean_iou: iou / n,
        pixel_accuracy: acc / n,
        mean_loss: loss / n,
        converged_fraction: (solves > 0).then(|| converged as f64 / solves as f64),
    })
}

/// One logging-window summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// Iterations completed.
    pub iter: usize,
    /// Learning rate of the last iteration in the window.
    pub lr: f64,
    /// Mean batch loss over the window.
    pub loss: f64,
    pub held_out_iou: f64,
    pub solver_converged_frac: Option<f64>,
}

/// Samples used for held-out metrics: the evaluation split, or the training
/// split when nothing is held out.
pub fn held_out_samples(dataset: &Dataset) -> &[Sample] {
    if dataset.held_out > 0 {
        dataset.evaluation()
    } else {
        dataset.train()
    }
}

/// Trains a freshly initialised head, seeded by `cfg.seed`.
pub fn train(model: &HeadModel, cfg: &TrainConfig, dataset: &Dataset) -> Result<(TrainState, Vec<MetricsRow>)> {
    let params = HeadParams::init(&model.config, cfg.seed)?;
    train_from(model, cfg, dataset, TrainState::new(params))
}

pub fn train_from(
    model: &HeadModel,
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut state: TrainState,
) -> Result<(TrainState, Vec<MetricsRow>)> {
    cfg.validate()?;
    let train_set = dataset.train();
    if train_set.is_empty() {
        return Err(IfrError::config("training split is empty"));
    }
    let mut order_rng = SplitMix64::substream(cfg.seed, 1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::new();

    let (mut window_loss, mut window_iters) = (0.0, 0usize);
    let (mut window_solves, mut window_converged, mut window_diverged) = (0usize, 0usize, 0usize);

    while state.iteration < cfg.total_iters {
        let iter = state.iteration;
        let mut grads = state.params.zeros_like();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = order_rng.permutation(train_set.len());
                cursor = 0;
            }
            let s = &train_set[order[cursor]];
            cursor += 1;
            let (loss, g, status) = model.loss_and_grad(&state.params, &s.feature, &s.mask)?;
            batch_loss += loss;
            axpy_params(&mut grads, 1.0, &g);
            if let Some(c) = status.converged {
                window_solves += 1;
                window_converged += usize::from(c);
                window_diverged += usize::from(status.diverged);
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        scale_params(&mut grads, inv);
        batch_loss *= inv;

        let norm = params_norm(&grads);
        if cfg.clip_norm > 0.0 && norm.is_finite() && norm > cfg.clip_norm {
            scale_params(&mut grads, cfg.clip_norm / norm);
        }
        let lr = lr_at(cfg, iter);
        sgd_step(&mut state, &grads, lr, cfg.momentum);
        state.loss_history.push(batch_loss);
        state.iteration += 1;
        window_loss += batch_loss;
        window_iters += 1;

        if state.iteration.is_multiple_of(cfg.log_every) || state.iteration == cfg.total_iters {
            let health = (window_solves > 0).then(|| window_converged as f64 / window_solves as f64);
            if window_solves > 0 && window_diverged as f64 > ABORT_DIVERGED_FRACTION * window_solves as f64 {
                return Err(IfrError::Divergence {
                    step: state.iteration,
                    detail: format!(
                        "{window_diverged} of {window_solves} forward solves diverged in the last {window_iters} iterations"
                    ),
                });
            }
            if let Some(h) = health {
                state.solver_health.push(h);
            }
            let eval = evaluate(model, &state.params, held_out_samples(dataset))?;
            log.push(MetricsRow {
                iter: state.iteration,
                lr,
                loss: window_loss / window_iters as f64,
                held_out_iou: eval.mean_iou,
                solver_converged_frac: health,
            });
            (window_loss, window_iters) = (0.0, 0);
            (window_solves, window_converged, window_diverged) = (0, 0, 0);
        }
    }
    Ok((state, log))
}

