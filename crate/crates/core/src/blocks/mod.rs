//! The double-residual transformation, the refinement-head strategies built
//! from it, the mask-predictor tail and exact parameter counting.

mod block;
mod count;
mod head;
mod predictor;

pub use block::{
    double_residual_forward, double_residual_vjp, BlockSpec, BlockTape, DoubleResidualParams,
    Shortcut, ShortcutKind,
};
pub(crate) use block::init_conv;
pub use count::{count_parameters, count_parameters_with, CountOptions, CountProfile, ParameterCount};
pub use head::{
    stacked_head_forward, unrolled_shared_forward, unrolled_shared_vjp, ChannelMultiplier,
    HeadConfig, Strategy,
};
pub use predictor::{mask_predictor_forward, mask_predictor_vjp, PredictorParams, PredictorTape};

use crate::error::Result;
use crate::tensor::{ConvParams, GroupNormParams, Tensor};

/// A transformation `F(h; x)` whose fixed point in `h` is the refined feature.
///
/// Implementors expose their forward map and the three adjoint pieces the
/// implicit backward pass needs (hidden state, input, parameters).
pub trait RefinementMap {
    type Tape;
    type Grads;

    fn apply(&self, h: &Tensor, x: &Tensor) -> Result<Tensor>;

    /// Forward evaluation that keeps the intermediates for later VJPs.
    fn record(&self, h: &Tensor, x: &Tensor) -> Result<(Tensor, Self::Tape)>;

    /// `u^T dF/dh` at the recorded point.
    fn vjp_hidden(&self, tape: &Self::Tape, cotangent: &Tensor) -> Result<Tensor>;

    /// `(u^T dF/dh, u^T dF/dx, u^T dF/dtheta)` at the recorded point.
    fn vjp_all(&self, tape: &Self::Tape, cotangent: &Tensor) -> Result<(Tensor, Tensor, Self::Grads)>;

    fn zero_grads(&self) -> Self::Grads;

    fn accumulate(acc: &mut Self::Grads, g: &Self::Grads);
}

/// Uniform access to the learnable tensors of a parameter record.
///
/// `named_tensors` and `tensors_mut` list the same tensors in the same order.
pub trait ParamSet {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_learnable(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl ParamSet for ConvParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        ConvParams::tensors_mut(self)
    }
}

impl ParamSet for GroupNormParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        GroupNormParams::tensors_mut(self)
    }
}

/// `dst += alpha * src` over matching parameter records.
pub fn axpy_params<P: ParamSet>(dst: &mut P, alpha: f64, src: &P) {
    let src = src.named_tensors();
    for (d, (_, s)) in dst.tensors_mut().into_iter().zip(src) {
        d.axpy(alpha, s);
    }
}

pub fn scale_params<P: ParamSet>(p: &mut P, factor: f64) {
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
}

pub fn params_norm<P: ParamSet>(p: &P) -> f64 {
    p.named_tensors()
        .iter()
        .map(|(_, t)| t.dot(t))
        .sum::<f64>()
        .sqrt()
}

pub fn params_dot<P: ParamSet>(a: &P, b: &P) -> f64 {
    a.named_tensors()
        .iter()
        .zip(b.named_tensors())
        .map(|((_, x), (_, y))| x.dot(y))
        .sum()
}

pub fn params_finite<P: ParamSet>(p: &P) -> bool {
    p.named_tensors().iter().all(|(_, t)| t.is_finite())
}
