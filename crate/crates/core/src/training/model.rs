use crate::blocks::{
    DoubleResidualParams, HeadConfig, ParamSet, PredictorParams, RefinementMap, Strategy,
};
use crate::data::{find, NamedTensors};
use crate::error::{IfrError, Result};
use crate::implicit::{ifr_backward, ifr_forward};
use crate::rng::SplitMix64;
use crate::solver::SolverConfig;
use crate::tensor::Tensor;

/// Learnable state of a mask head: refinement stages followed by the
/// predictor tail. Weight-tied heads own exactly one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub stages: Vec<DoubleResidualParams>,
    pub predictor: PredictorParams,
}

impl HeadParams {
    pub fn init(cfg: &HeadConfig, seed: u64) -> Result<Self> {
        let spec = cfg.block_spec()?;
        let mut rng = SplitMix64::substream(seed, 0);
        let stages = (0..cfg.num_blocks())
            .map(|_| DoubleResidualParams::init(&spec, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let predictor = PredictorParams::init(cfg.channels, cfg.predictor_classes, &mut rng)?;
        Ok(Self { stages, predictor })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stages: self.stages.iter().map(|s| s.zeros_like()).collect(),
            predictor: self.predictor.zeros_like(),
        }
    }

    pub fn enforce_constraints(&mut self) {
        self.stages.iter_mut().for_each(|s| s.enforce_constraints());
    }
}

impl ParamSet for HeadParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.extend(s.named_tensors().into_iter().map(|(n, t)| (format!("stage{i}.{n}"), t)));
        }
        out.extend(
            self.predictor
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("predictor.{n}"), t)),
        );
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.stages.iter_mut().flat_map(|s| s.tensors_mut()).collect();
        out.extend(self.predictor.tensors_mut());
        out
    }
}

/// How the refinement solve went for one sample; `None` fields mean the
/// strategy has no solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveStatus {
    pub converged: Option<bool>,
    pub diverged: bool,
}

/// Architecture of a head: what to run, not the weights it runs with.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub config: HeadConfig,
    /// Solver settings for implicit heads; `max_iters` is replaced by the
    /// head's budget.
    pub solver: SolverConfig,
}

impl HeadModel {
    pub fn new(config: HeadConfig, solver: SolverConfig) -> Result<Self> {
        config.validate()?;
        let model = Self { config, solver };
        model.effective_solver().validate()?;
        Ok(model)
    }

    pub fn effective_solver(&self) -> SolverConfig {
        match self.config.strategy {
            Strategy::ImplicitBroyden => self.solver.with_budget(self.config.depth_or_budget),
            _ => self.solver.clone(),
        }
    }

    fn check(&self, params: &HeadParams) -> Result<()> {
        if params.stages.len() != self.config.num_blocks() {
            return Err(IfrError::shape(
                "HeadModel",
                format!(
                    "{} stages for a head that needs {}",
                    params.stages.len(),
                    self.config.num_blocks()
                ),
            ));
        }
        Ok(())
    }

    /// The refined feature fed to the predictor.
    pub fn refine(&self, params: &HeadParams, x: &Tensor) -> Result<(Tensor, SolveStatus)> {
        self.check(params)?;
        let depth = self.config.depth_or_budget;
        match self.config.strategy {
            Strategy::ExplicitIndependent => {
                Ok((crate::blocks::stacked_head_forward(&params.stages, x)?, SolveStatus::default()))
            }
            Strategy::UnrolledShared => {
                let (h, _) = crate::blocks::unrolled_shared_forward(&params.stages[0], x, depth)?;
                Ok((h, SolveStatus::default()))
            }
            Strategy::ImplicitBroyden => {
                let rec = ifr_forward(&params.stages[0], x, &self.effective_solver())?;
                let status = SolveStatus {
                    converged: Some(rec.converged()),
                    diverged: rec.forward_result.divergence.is_some(),
                };
                Ok((rec.equilibrium, status))
            }
        }
    }

    pub fn predict(&self, params: &HeadParams, x: &Tensor) -> Result<(Tensor, SolveStatus)> {
        let (h, status) = self.refine(params, x)?;
        Ok((params.predictor.record(&h)?.logits, status))
    }

    /// Loss of one sample and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        params: &HeadParams,
        x: &Tensor,
        target: &Tensor,
    ) -> Result<(f64, HeadParams, SolveStatus)> {
        self.check(params)?;
        let depth = self.config.depth_or_budget;
        let (loss, stages, predictor, status) = match self.config.strategy {
            Strategy::ExplicitIndependent | Strategy::UnrolledShared => {
                let tied = self.config.strategy == Strategy::UnrolledShared;
                let n = if tied { depth } else { params.stages.len() };
                let stage = |i: usize| if tied { &params.stages[0] } else { &params.stages[i] };
                let mut h = if n == 0 { x.clone() } else { Tensor::zeros_like(x) };
                let mut tapes = Vec::with_capacity(n);
                for i in 0..n {
                    let tape = stage(i).record(&h, x)?;
                    h = tape.output.clone();
                    tapes.push(tape);
                }
                let tape = params.predictor.record(&h)?;
                let (loss, d_logits) = super::bce_mask_loss(&tape.logits, target)?;
                let (mut adj, d_pred) = params.predictor.backward(&tape, &d_logits)?;
                let mut grads: Vec<DoubleResidualParams> = params.stages.iter().map(|s| s.zeros_like()).collect();
                for (i, tape) in tapes.iter().enumerate().rev() {
                    let (dr, g) = stage(i).backward(tape, &adj, true)?;
                    let slot = if tied { 0 } else { i };
                    DoubleResidualParams::accumulate(&mut grads[slot], &g.expect("requested"));
                    adj = dr;
                }
                (loss, grads, d_pred, SolveStatus::default())
            }
            Strategy::ImplicitBroyden => {
                let cfg = self.effective_solver();
                let rec = ifr_forward(&params.stages[0], x, &cfg)?;
                let tape = params.predictor.record(&rec.equilibrium)?;
                let (loss, d_logits) = super::bce_mask_loss(&tape.logits, target)?;
                let (dh, d_pred) = params.predictor.backward(&tape, &d_logits)?;
                let g = ifr_backward(&rec, &dh, &cfg)?;
                let status = SolveStatus {
                    converged: Some(rec.converged()),
                    diverged: rec.forward_result.divergence.is_some(),
                };
                (loss, vec![g.params], d_pred, status)
            }
        };
        Ok((loss, HeadParams { stages, predictor }, status))
    }
}

const HEAD_CONFIG_KEY: &str = "meta.head_config";
const SOLVER_CONFIG_KEY: &str = "meta.solver_config";

/// UTF-8 text as a rank-1 tensor of byte values.
pub fn text_tensor(s: &str) -> Tensor {
    Tensor::from_vec(s.bytes().map(f64::from).collect())
}

/// Inverse of [`text_tensor`].
pub fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            (v.fract() == 0.0 && (0.0..=255.0).contains(&v))
                .then_some(v as u8)
                .ok_or_else(|| IfrError::config("checkpoint metadata is not byte-valued"))
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| IfrError::config(format!("checkpoint metadata is not UTF-8: {e}")))
}

/// Parameters plus the head and solver configuration as named tensors. The
/// configurations travel as UTF-8 JSON, one byte per value.
pub fn to_checkpoint(model: &HeadModel, params: &HeadParams) -> Result<NamedTensors> {
    let head = serde_json::to_string(&model.config).map_err(|e| IfrError::config(e.to_string()))?;
    let solver = serde_json::to_string(&model.solver).map_err(|e| IfrError::config(e.to_string()))?;
    let mut out: NamedTensors = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    out.push((HEAD_CONFIG_KEY.into(), text_tensor(&head)));
    out.push((SOLVER_CONFIG_KEY.into(), text_tensor(&solver)));
    Ok(out)
}

pub fn from_checkpoint(tensors: &[(String, Tensor)]) -> Result<(HeadModel, HeadParams)> {
    let head: HeadConfig = serde_json::from_str(&tensor_text(find(tensors, HEAD_CONFIG_KEY)?)?)
        .map_err(|e| IfrError::config(format!("checkpoint head config: {e}")))?;
    let solver: SolverConfig = serde_json::from_str(&tensor_text(find(tensors, SOLVER_CONFIG_KEY)?)?)
        .map_err(|e| IfrError::config(format!("checkpoint solver config: {e}")))?;
    let model = HeadModel::new(head, solver)?;
    let mut params = HeadParams::init(&model.config, 0)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = find(tensors, name)?;
        if t.shape() != slot.shape() {
            return Err(IfrError::shape(
                "from_checkpoint",
                format!("'{name}' has shape {:?}, expected {:?}", t.shape(), slot.shape()),
            ));
        }
        t.ensure_finite("from_checkpoint")?;
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok((model, params))
}
