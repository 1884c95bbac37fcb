use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BlockSpec, DoubleResidualParams, RefinementMap, ShortcutKind};
use crate::error::{IfrError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// `M` stacked blocks with independent weights.
    ExplicitIndependent,
    /// One block applied `N` times.
    UnrolledShared,
    /// One block solved to its fixed point with Broyden iterations.
    ImplicitBroyden,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ExplicitIndependent => "explicit-independent",
            Strategy::UnrolledShared => "unrolled-shared",
            Strategy::ImplicitBroyden => "implicit-broyden",
        }
    }

    pub fn is_weight_tied(self) -> bool {
        !matches!(self, Strategy::ExplicitIndependent)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = IfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit-independent" | "explicit" => Ok(Strategy::ExplicitIndependent),
            "unrolled-shared" | "unrolled" => Ok(Strategy::UnrolledShared),
            "implicit-broyden" | "implicit" => Ok(Strategy::ImplicitBroyden),
            other => Err(IfrError::config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Width of the block's intermediate layer relative to its input width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ChannelMultiplier {
    #[serde(rename = "1/8")]
    Eighth,
    #[serde(rename = "1/4")]
    Quarter,
    #[serde(rename = "1/2")]
    Half,
    #[default]
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl ChannelMultiplier {
    pub const ALL: [ChannelMultiplier; 5] = [
        ChannelMultiplier::Eighth,
        ChannelMultiplier::Quarter,
        ChannelMultiplier::Half,
        ChannelMultiplier::One,
        ChannelMultiplier::Two,
    ];

    /// `(numerator, denominator)`.
    pub fn ratio(self) -> (usize, usize) {
        match self {
            ChannelMultiplier::Eighth => (1, 8),
            ChannelMultiplier::Quarter => (1, 4),
            ChannelMultiplier::Half => (1, 2),
            ChannelMultiplier::One => (1, 1),
            ChannelMultiplier::Two => (2, 1),
        }
    }

    pub fn apply(self, channels: usize) -> Result<usize> {
        let (num, den) = self.ratio();
        if !(channels * num).is_multiple_of(den) || channels * num / den == 0 {
            return Err(IfrError::config(format!(
                "channel multiplier {self} does not give a whole channel count for {channels} channels"
            )));
        }
        Ok(channels * num / den)
    }
}

impl fmt::Display for ChannelMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ratio() {
            (n, 1) => write!(f, "{n}"),
            (n, d) => write!(f, "{n}/{d}"),
        }
    }
}

impl FromStr for ChannelMultiplier {
    type Err = IfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/8" | "0.125" => Ok(ChannelMultiplier::Eighth),
            "1/4" | "0.25" => Ok(ChannelMultiplier::Quarter),
            "1/2" | "0.5" => Ok(ChannelMultiplier::Half),
            "1" | "1.0" => Ok(ChannelMultiplier::One),
            "2" | "2.0" => Ok(ChannelMultiplier::Two),
            other => Err(IfrError::config(format!(
                "channel multiplier must be one of 1/8, 1/4, 1/2, 1, 2 (got '{other}')"
            ))),
        }
    }
}

fn default_channels() -> usize {
    256
}
fn default_true() -> bool {
    true
}
fn default_classes() -> usize {
    80
}

/// Which refinement head to build, and how wide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub strategy: Strategy,
    /// Stage count for explicit heads, unroll length for shared heads, Broyden
    /// budget (forward and backward) for implicit heads.
    pub depth_or_budget: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub channel_multiplier: ChannelMultiplier,
    #[serde(default = "default_true")]
    pub double_residual: bool,
    #[serde(default = "default_classes")]
    pub predictor_classes: usize,
    #[serde(default = "default_true")]
    pub weight_norm: bool,
    /// Group norm after the residual sum.
    #[serde(default = "default_true")]
    pub output_norm: bool,
    #[serde(default)]
    pub shortcut: ShortcutKind,
    #[serde(default)]
    pub gn_groups: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::ImplicitBroyden,
            depth_or_budget: 15,
            channels: default_channels(),
            channel_multiplier: ChannelMultiplier::One,
            double_residual: true,
            predictor_classes: default_classes(),
            weight_norm: true,
            output_norm: true,
            shortcut: ShortcutKind::Identity,
            gn_groups: None,
        }
    }
}

impl HeadConfig {
    /// Desk-scale head for the synthetic task: 8 channels, one mask class.
    pub fn toy(strategy: Strategy, depth_or_budget: usize) -> Self {
        Self {
            strategy,
            depth_or_budget,
            channels: 8,
            predictor_classes: 1,
            ..Self::default()
        }
    }

    pub fn mid_channels(&self) -> Result<usize> {
        self.channel_multiplier.apply(self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(IfrError::config("head channels must be positive"));
        }
        if self.predictor_classes == 0 {
            return Err(IfrError::config("predictor_classes must be positive"));
        }
        self.mid_channels()?;
        if self.strategy.is_weight_tied() && self.depth_or_budget == 0 {
            return Err(IfrError::config(format!(
                "{} needs depth_or_budget of at least 1",
                self.strategy
            )));
        }
        if let Some(g) = self.gn_groups {
            let mid = self.mid_channels()?;
            if g == 0 || !self.channels.is_multiple_of(g) || mid % g != 0 {
                return Err(IfrError::config(format!(
                    "gn_groups {g} must divide {} and {mid}",
                    self.channels
                )));
            }
        }
        Ok(())
    }

    pub fn block_spec(&self) -> Result<BlockSpec> {
        self.validate()?;
        Ok(BlockSpec {
            channels: self.channels,
            mid_channels: self.mid_channels()?,
            weight_norm: self.weight_norm,
            residual_enabled: self.double_residual,
            output_norm: self.output_norm,
            shortcut: self.shortcut,
            gn_groups: self.gn_groups,
            gn_epsilon: crate::tensor::DEFAULT_GN_EPS,
        })
    }

    /// Number of distinct blocks the head owns.
    pub fn num_blocks(&self) -> usize {
        match self.strategy {
            Strategy::ExplicitIndependent => self.depth_or_budget,
            Strategy::UnrolledShared | Strategy::ImplicitBroyden => 1,
        }
    }
}

/// `h_0 = 0`, `h_{i+1} = F_i(h_i; x)` with independent stage parameters.
/// With no stages the input passes through unchanged.
pub fn stacked_head_forward(params: &[DoubleResidualParams], x: &Tensor) -> Result<Tensor> {
    if params.is_empty() {
        return Ok(x.clone());
    }
    let mut h = Tensor::zeros_like(x);
    for p in params {
        h = p.apply(&h, x)?;
    }
    Ok(h)
}

/// Applies the weight-tied map `n` times from `h_0 = 0`; `trace[i]` is
/// `|h_{i+1} - h_i|`.
pub fn unrolled_shared_forward<M: RefinementMap + ?Sized>(
    map: &M,
    x: &Tensor,
    n: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let mut h = Tensor::zeros_like(x);
    let mut trace = Vec::with_capacity(n);
    for step in 0..n {
        let next = map.apply(&h, x).map_err(|e| match e {
            IfrError::NonFinite { .. } => IfrError::Divergence {
                step,
                detail: "non-finite iterate".into(),
            },
            other => other,
        })?;
        if !next.is_finite() {
            return Err(IfrError::Divergence {
                step,
                detail: "non-finite iterate".into(),
            });
        }
        trace.push(next.sub(&h)?.norm());
        h = next;
    }
    Ok((h, trace))
}

/// Backpropagation through `n` weight-tied steps from `h_0 = 0`.
///
/// Returns `(h_n, dL/dx, dL/dtheta)` for `dL/dh_n = upstream`.
pub fn unrolled_shared_vjp<M: RefinementMap + ?Sized>(
    map: &M,
    x: &Tensor,
    n: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, M::Grads)> {
    let mut h = Tensor::zeros_like(x);
    let mut tapes = Vec::with_capacity(n);
    for _ in 0..n {
        let (next, tape) = map.record(&h, x)?;
        tapes.push(tape);
        h = next;
    }
    h.ensure_same_shape(upstream, "unrolled_shared_vjp")?;
    let mut adj = upstream.clone();
    let mut dx = Tensor::zeros_like(x);
    let mut grads = map.zero_grads();
    for tape in tapes.iter().rev() {
        let (dh, dxi, g) = map.vjp_all(tape, &adj)?;
        dx.axpy(1.0, &dxi);
        M::accumulate(&mut grads, &g);
        adj = dh;
    }
    Ok((h, dx, grads))
}
