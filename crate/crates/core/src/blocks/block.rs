use serde::{Deserialize, Serialize};

use super::{ParamSet, RefinementMap};
use crate::error::{IfrError, Result};
use crate::rng::SplitMix64;
use crate::tensor::norm::{default_groups, group_norm_backward, group_norm_cached};
use crate::tensor::{
    add, conv2d, conv2d_backward, group_norm, relu, relu_vjp, ConvParams, GroupNormCache,
    GroupNormParams, Tensor, DEFAULT_GN_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShortcutKind {
    #[default]
    Identity,
    Conv1x1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    Identity,
    Conv1x1(ConvParams),
}

/// Structural choices for one double-residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub channels: usize,
    pub mid_channels: usize,
    pub weight_norm: bool,
    pub residual_enabled: bool,
    pub output_norm: bool,
    pub shortcut: ShortcutKind,
    pub gn_groups: Option<usize>,
    pub gn_epsilon: f64,
}

impl BlockSpec {
    pub fn new(channels: usize, mid_channels: usize) -> Self {
        Self {
            channels,
            mid_channels,
            weight_norm: true,
            residual_enabled: true,
            output_norm: true,
            shortcut: ShortcutKind::Identity,
            gn_groups: None,
            gn_epsilon: DEFAULT_GN_EPS,
        }
    }

    fn groups_for(&self, channels: usize) -> usize {
        match self.gn_groups {
            Some(g) if channels.is_multiple_of(g) => g,
            _ => default_groups(channels),
        }
    }
}

/// Parameters of `F(h; x) = N3(W2(relu(W1(R))) + Ws(R))` with `R = h + x`,
/// where `W1`, `W2` are 3x3 convolutions each followed by group norm and `N3`
/// is the optional output group norm.
///
/// Also used as the gradient record for a block.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleResidualParams {
    pub w1: ConvParams,
    pub gn1: GroupNormParams,
    pub w2: ConvParams,
    pub gn2: GroupNormParams,
    pub shortcut: Shortcut,
    pub residual_enabled: bool,
    pub output_norm: Option<GroupNormParams>,
}

pub(crate) fn init_conv(
    rng: &mut SplitMix64,
    out: usize,
    cin: usize,
    k: usize,
    weight_norm: bool,
) -> Result<ConvParams> {
    let fan_in = cin * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..out * fan_in).map(|_| std * rng.normal()).collect();
    let direction = Tensor::new(vec![out, cin, k, k], data)?;
    let bias = Tensor::zeros(&[out]);
    if weight_norm {
        let plain = ConvParams::new(direction.clone(), bias.clone())?;
        let gain = Tensor::from_vec(plain.direction_norms());
        ConvParams::with_weight_norm(direction, gain, bias)
    } else {
        ConvParams::new(direction, bias)
    }
}

impl DoubleResidualParams {
    /// He-normal directions, zero biases, identity group-norm affines and
    /// weight-norm gains equal to the initial direction norms.
    pub fn init(spec: &BlockSpec, rng: &mut SplitMix64) -> Result<Self> {
        let (c, m) = (spec.channels, spec.mid_channels);
        if c == 0 || m == 0 {
            return Err(IfrError::config("block channel counts must be positive"));
        }
        let w1 = init_conv(rng, m, c, 3, spec.weight_norm)?;
        let w2 = init_conv(rng, c, m, 3, spec.weight_norm)?;
        let shortcut = match spec.shortcut {
            ShortcutKind::Identity => Shortcut::Identity,
            ShortcutKind::Conv1x1 => Shortcut::Conv1x1(init_conv(rng, c, c, 1, spec.weight_norm)?),
        };
        Ok(Self {
            w1,
            gn1: GroupNormParams::new(m, spec.groups_for(m), spec.gn_epsilon)?,
            w2,
            gn2: GroupNormParams::new(c, spec.groups_for(c), spec.gn_epsilon)?,
            shortcut,
            residual_enabled: spec.residual_enabled,
            output_norm: if spec.output_norm {
                Some(GroupNormParams::new(c, spec.groups_for(c), spec.gn_epsilon)?)
            } else {
                None
            },
        })
    }

    /// Every learnable value set to zero (including norm scales).
    pub fn zeroed(spec: &BlockSpec) -> Result<Self> {
        let p = Self::init(spec, &mut SplitMix64::new(0))?;
        Ok(p.zeros_like())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: self.w1.zeros_like(),
            gn1: self.gn1.zeros_like(),
            w2: self.w2.zeros_like(),
            gn2: self.gn2.zeros_like(),
            shortcut: match &self.shortcut {
                Shortcut::Identity => Shortcut::Identity,
                Shortcut::Conv1x1(p) => Shortcut::Conv1x1(p.zeros_like()),
            },
            residual_enabled: self.residual_enabled,
            output_norm: self.output_norm.as_ref().map(GroupNormParams::zeros_like),
        }
    }

    pub fn channels(&self) -> usize {
        self.w2.dims().0
    }

    pub fn mid_channels(&self) -> usize {
        self.w1.dims().0
    }

    pub fn spec(&self) -> BlockSpec {
        BlockSpec {
            channels: self.channels(),
            mid_channels: self.mid_channels(),
            weight_norm: self.w1.weight_norm,
            residual_enabled: self.residual_enabled,
            output_norm: self.output_norm.is_some(),
            shortcut: match self.shortcut {
                Shortcut::Identity => ShortcutKind::Identity,
                Shortcut::Conv1x1(_) => ShortcutKind::Conv1x1,
            },
            gn_groups: Some(self.gn2.num_groups),
            gn_epsilon: self.gn2.epsilon,
        }
    }

    /// `GN2(W2(relu(GN1(W1(r)))))`, the main path on its own.
    pub fn main_path(&self, r: &Tensor) -> Result<Tensor> {
        let a1 = conv2d(r, &self.w1, 1, 1)?;
        let n1 = group_norm(&a1, &self.gn1)?;
        let a2 = conv2d(&relu(&n1), &self.w2, 1, 1)?;
        group_norm(&a2, &self.gn2)
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn record(&self, h: &Tensor, x: &Tensor) -> Result<BlockTape> {
        if h.shape() != x.shape() {
            return Err(IfrError::shape(
                "double_residual_forward",
                format!("hidden {:?} and input {:?} differ", h.shape(), x.shape()),
            ));
        }
        let (c, _, _) = x.dims3()?;
        if c != self.channels() || self.w1.dims().1 != c {
            return Err(IfrError::shape(
                "double_residual_forward",
                format!("block maps {} channels, feature has {c}", self.channels()),
            ));
        }
        let r = add(h, x)?;
        let a1 = conv2d(&r, &self.w1, 1, 1)?;
        let (n1, gn1_cache) = group_norm_cached(&a1, &self.gn1)?;
        let act = relu(&n1);
        let a2 = conv2d(&act, &self.w2, 1, 1)?;
        let (mut sum, gn2_cache) = group_norm_cached(&a2, &self.gn2)?;
        if self.residual_enabled {
            match &self.shortcut {
                Shortcut::Identity => sum.axpy(1.0, &r),
                Shortcut::Conv1x1(ws) => sum.axpy(1.0, &conv2d(&r, ws, 1, 0)?),
            }
        }
        let (output, gn3_cache) = match &self.output_norm {
            Some(gn3) => {
                let (y, cache) = group_norm_cached(&sum, gn3)?;
                (y, Some(cache))
            }
            None => (sum, None),
        };
        Ok(BlockTape {
            r,
            n1,
            act,
            gn1_cache,
            gn2_cache,
            gn3_cache,
            output,
        })
    }

    /// Pulls `cotangent` back to `R` (equal to both dH and dX), and to the
    /// parameters when `want_params` is set.
    pub fn backward(
        &self,
        tape: &BlockTape,
        cotangent: &Tensor,
        want_params: bool,
    ) -> Result<(Tensor, Option<DoubleResidualParams>)> {
        tape.output.ensure_same_shape(cotangent, "double_residual_vjp")?;
        let (d_sum, d_gn3) = match (&self.output_norm, &tape.gn3_cache) {
            (Some(gn3), Some(cache)) => {
                let (d, dp) = group_norm_backward(cache, gn3, cotangent, want_params)?;
                (d, dp)
            }
            _ => (cotangent.clone(), None),
        };

        let (mut d_r, d_ws) = if self.residual_enabled {
            match &self.shortcut {
                Shortcut::Identity => (d_sum.clone(), None),
                Shortcut::Conv1x1(ws) => {
                    let (dr, dws) = conv2d_backward(&tape.r, ws, 1, 0, &d_sum, true, want_params)?;
                    (dr.expect("requested"), dws)
                }
            }
        } else {
            (Tensor::zeros_like(&tape.r), None)
        };

        let (d_a2, d_gn2) = group_norm_backward(&tape.gn2_cache, &self.gn2, &d_sum, want_params)?;
        let (d_act, d_w2) = conv2d_backward(&tape.act, &self.w2, 1, 1, &d_a2, true, want_params)?;
        let d_n1 = relu_vjp(&tape.n1, &d_act.expect("requested"))?;
        let (d_a1, d_gn1) = group_norm_backward(&tape.gn1_cache, &self.gn1, &d_n1, want_params)?;
        let (d_r_main, d_w1) = conv2d_backward(&tape.r, &self.w1, 1, 1, &d_a1, true, want_params)?;
        d_r.axpy(1.0, &d_r_main.expect("requested"));

        let grads = if want_params {
            Some(DoubleResidualParams {
                w1: d_w1.expect("requested"),
                gn1: d_gn1.expect("requested"),
                w2: d_w2.expect("requested"),
                gn2: d_gn2.expect("requested"),
                shortcut: match (&self.shortcut, d_ws) {
                    (Shortcut::Conv1x1(_), Some(d)) => Shortcut::Conv1x1(d),
                    (Shortcut::Conv1x1(ws), None) => Shortcut::Conv1x1(ws.zeros_like()),
                    (Shortcut::Identity, _) => Shortcut::Identity,
                },
                residual_enabled: self.residual_enabled,
                output_norm: self.output_norm.as_ref().map(|gn3| d_gn3.unwrap_or_else(|| gn3.zeros_like())),
            })
        } else {
            None
        };
        Ok((d_r, grads))
    }

    /// Re-imposes the weight-norm direction floor after an update.
    pub fn enforce_constraints(&mut self) {
        self.w1.enforce_direction_floor();
        self.w2.enforce_direction_floor();
        if let Shortcut::Conv1x1(ws) = &mut self.shortcut {
            ws.enforce_direction_floor();
        }
    }
}

impl ParamSet for DoubleResidualParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut groups = vec![
            ("w1", self.w1.tensors()),
            ("gn1", self.gn1.tensors()),
            ("w2", self.w2.tensors()),
            ("gn2", self.gn2.tensors()),
        ];
        if let Shortcut::Conv1x1(ws) = &self.shortcut {
            groups.push(("ws", ws.tensors()));
        }
        if let Some(gn3) = &self.output_norm {
            groups.push(("gn3", gn3.tensors()));
        }
        groups
            .into_iter()
            .flat_map(|(prefix, items)| items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t)))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.w1.tensors_mut();
        out.extend(self.gn1.tensors_mut());
        out.extend(self.w2.tensors_mut());
        out.extend(self.gn2.tensors_mut());
        if let Shortcut::Conv1x1(ws) = &mut self.shortcut {
            out.extend(ws.tensors_mut());
        }
        if let Some(gn3) = &mut self.output_norm {
            out.extend(gn3.tensors_mut());
        }
        out
    }
}

/// Intermediates of one block evaluation.
#[derive(Debug, Clone)]
pub struct BlockTape {
    r: Tensor,
    n1: Tensor,
    act: Tensor,
    gn1_cache: GroupNormCache,
    gn2_cache: GroupNormCache,
    gn3_cache: Option<GroupNormCache>,
    pub output: Tensor,
}

pub fn double_residual_forward(p: &DoubleResidualParams, h: &Tensor, x: &Tensor) -> Result<Tensor> {
    Ok(p.record(h, x)?.output)
}

/// Returns `(dH, dX, dParams)`.
pub fn double_residual_vjp(
    p: &DoubleResidualParams,
    h: &Tensor,
    x: &Tensor,
    cotangent: &Tensor,
) -> Result<(Tensor, Tensor, DoubleResidualParams)> {
    let tape = p.record(h, x)?;
    let (d_r, grads) = p.backward(&tape, cotangent, true)?;
    Ok((d_r.clone(), d_r, grads.expect("requested")))
}

impl RefinementMap for DoubleResidualParams {
    type Tape = BlockTape;
    type Grads = DoubleResidualParams;

    fn apply(&self, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        double_residual_forward(self, h, x)
    }

    fn record(&self, h: &Tensor, x: &Tensor) -> Result<(Tensor, BlockTape)> {
        let tape = DoubleResidualParams::record(self, h, x)?;
        Ok((tape.output.clone(), tape))
    }

    fn vjp_hidden(&self, tape: &BlockTape, cotangent: &Tensor) -> Result<Tensor> {
        Ok(self.backward(tape, cotangent, false)?.0)
    }

    fn vjp_all(&self, tape: &BlockTape, cotangent: &Tensor) -> Result<(Tensor, Tensor, Self::Grads)> {
        let (d_r, grads) = self.backward(tape, cotangent, true)?;
        Ok((d_r.clone(), d_r, grads.expect("requested")))
    }

    fn zero_grads(&self) -> Self::Grads {
        self.zeros_like()
    }

    fn accumulate(acc: &mut Self::Grads, g: &Self::Grads) {
        super::axpy_params(acc, 1.0, g);
    }
}
