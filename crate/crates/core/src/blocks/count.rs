use std::fmt;
use std::str::FromStr;

use super::{ChannelMultiplier, HeadConfig, ShortcutKind, Strategy};
use crate::error::{IfrError, Result};

/// Named head widths for parameter counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountProfile {
    /// Mask R-CNN mask head: 256 channels, 80 classes, no weight norm.
    CocoMaskhead,
    /// The synthetic-task head.
    Toy,
}

impl CountProfile {
    pub fn head_config(self, strategy: Strategy, depth_or_budget: usize, multiplier: ChannelMultiplier) -> HeadConfig {
        let base = match self {
            CountProfile::CocoMaskhead => HeadConfig {
                weight_norm: false,
                ..HeadConfig::default()
            },
            CountProfile::Toy => HeadConfig::toy(strategy, depth_or_budget),
        };
        HeadConfig {
            strategy,
            depth_or_budget,
            channel_multiplier: multiplier,
            ..base
        }
    }
}

impl fmt::Display for CountProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountProfile::CocoMaskhead => "coco-maskhead",
            CountProfile::Toy => "toy",
        })
    }
}

impl FromStr for CountProfile {
    type Err = IfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco-maskhead" => Ok(CountProfile::CocoMaskhead),
            "toy" => Ok(CountProfile::Toy),
            other => Err(IfrError::config(format!(
                "unknown profile '{other}' (expected coco-maskhead or toy)"
            ))),
        }
    }
}

/// Which kinds of learnable values enter the count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountOptions {
    pub include_bias: bool,
    pub include_gn_affine: bool,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            include_bias: true,
            include_gn_affine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    /// One refinement block.
    pub block: usize,
    pub num_blocks: usize,
    pub deconv: usize,
    pub predictor: usize,
    pub total: usize,
}

impl ParameterCount {
    pub fn tail(&self) -> usize {
        self.deconv + self.predictor
    }

    /// Total in millions, rounded to one decimal.
    pub fn millions_rounded(&self) -> f64 {
        (self.total as f64 / 1e5).round() / 10.0
    }
}

/// Exact learnable-value count with every bias and norm affine included.
pub fn count_parameters(cfg: &HeadConfig) -> Result<ParameterCount> {
    count_parameters_with(cfg, CountOptions::default())
}

pub fn count_parameters_with(cfg: &HeadConfig, opts: CountOptions) -> Result<ParameterCount> {
    cfg.validate()?;
    let c = cfg.channels;
    let mid = cfg.mid_channels()?;
    let bias = |n: usize| if opts.include_bias { n } else { 0 };
    let affine = |n: usize| if opts.include_gn_affine { 2 * n } else { 0 };
    let gain = |n: usize| if cfg.weight_norm { n } else { 0 };

    let conv = |out: usize, cin: usize, k: usize, wn: bool| {
        out * cin * k * k + bias(out) + if wn { gain(out) } else { 0 }
    };

    let mut block = conv(mid, c, 3, true) + affine(mid) + conv(c, mid, 3, true) + affine(c);
    if cfg.double_residual && cfg.shortcut == ShortcutKind::Conv1x1 {
        block += conv(c, c, 1, true);
    }
    if cfg.output_norm {
        block += affine(c);
    }
    let num_blocks = cfg.num_blocks();
    let deconv = conv(c, c, 2, false);
    let predictor = conv(cfg.predictor_classes, c, 1, false);
    Ok(ParameterCount {
        block,
        num_blocks,
        deconv,
        predictor,
        total: block * num_blocks + deconv + predictor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coco(strategy: Strategy, depth: usize, mult: ChannelMultiplier) -> HeadConfig {
        CountProfile::CocoMaskhead.head_config(strategy, depth, mult)
    }

    #[test]
    fn tail_inventory() {
        let n = count_parameters(&coco(Strategy::ImplicitBroyden, 15, ChannelMultiplier::One)).unwrap();
        // 256*256*2*2 + 256 and 80*256 + 80.
        assert_eq!(n.deconv, 262_400);
        assert_eq!(n.predictor, 20_560);
    }

    #[test]
    fn block_inventory_literal_form() {
        // Two 3x3 convs with biases plus two GN affines: 2*(589_824 + 256) + 2*512.
        let cfg = HeadConfig {
            output_norm: false,
            ..coco(Strategy::ImplicitBroyden, 15, ChannelMultiplier::One)
        };
        assert_eq!(count_parameters(&cfg).unwrap().block, 1_181_184);
    }

    #[test]
    fn excluding_bias_and_affine_leaves_kernels() {
        let cfg = coco(Strategy::ImplicitBroyden, 15, ChannelMultiplier::One);
        let n = count_parameters_with(
            &cfg,
            CountOptions {
                include_bias: false,
                include_gn_affine: false,
            },
        )
        .unwrap();
        assert_eq!(n.block, 2 * 256 * 256 * 9);
    }

    #[test]
    fn explicit_is_four_blocks_plus_tail() {
        let implicit = count_parameters(&coco(Strategy::ImplicitBroyden, 15, ChannelMultiplier::One)).unwrap();
        let explicit = count_parameters(&coco(Strategy::ExplicitIndependent, 4, ChannelMultiplier::One)).unwrap();
        assert_eq!(explicit.total, 4 * implicit.block + implicit.tail());
    }

    #[test]
    fn conv_shortcut_adds_a_pointwise_conv() {
        let base = coco(Strategy::ImplicitBroyden, 15, ChannelMultiplier::One);
        let with = HeadConfig {
            shortcut: ShortcutKind::Conv1x1,
            ..base.clone()
        };
        let d = count_parameters(&with).unwrap().block - count_parameters(&base).unwrap().block;
        assert_eq!(d, 256 * 256 + 256);
    }
}
