//! Synthetic (feature, mask) pairs and the on-disk tensor container.
//!
//! Each mask is a random binary shape on a 28x28 grid. Its feature is the
//! 14x14 average-pooled mask pushed through a fixed random per-channel affine
//! encoder, plus Gaussian noise, with a 5x5 patch near the object wiped out.
//! Pixels under the patch can only be recovered from surrounding context.

mod container;
mod shapes;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use container::{
    decode_container, encode_container, find, load_container, save_container, ContainerError,
    NamedTensors, MAGIC, VERSION,
};
pub use shapes::MASK_SIDE;

use crate::error::{IfrError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use shapes::{random_ellipse, random_polygon, random_two_blob, Region};

pub const FEATURE_SIDE: usize = 14;
pub const PATCH_SIDE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    TwoBlobUnion,
    /// Each sample picks one of the three families uniformly.
    #[default]
    Mixed,
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Polygon => "polygon",
            ShapeFamily::TwoBlobUnion => "two-blob-union",
            ShapeFamily::Mixed => "mixed",
        })
    }
}

impl FromStr for ShapeFamily {
    type Err = IfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeFamily::Ellipse),
            "polygon" => Ok(ShapeFamily::Polygon),
            "two-blob-union" => Ok(ShapeFamily::TwoBlobUnion),
            "mixed" => Ok(ShapeFamily::Mixed),
            other => Err(IfrError::config(format!("unknown shape family '{other}'"))),
        }
    }
}

fn default_channels() -> usize {
    8
}
fn default_noise() -> f64 {
    0.6
}
fn default_encoder_gain() -> f64 {
    6.0
}
fn default_encoder_seed() -> u64 {
    7
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub shape_family: ShapeFamily,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_encoder_seed")]
    pub encoder_seed: u64,
    /// Standard deviation of the encoder weights; the offsets use half of it.
    /// Features that are large next to the unit-scale refined state keep the
    /// trained block contractive.
    #[serde(default = "default_encoder_gain")]
    pub encoder_gain: f64,
    /// Trailing samples reserved for evaluation; `count / 5` when absent.
    #[serde(default)]
    pub held_out: Option<usize>,
    #[serde(default = "default_true")]
    pub corrupt_patch: bool,
    /// Channel 0 carries the pooled mask unchanged, all other channels are 0.
    #[serde(default)]
    pub identity_encoder: bool,
}

impl DatasetSpec {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            channels: default_channels(),
            shape_family: ShapeFamily::default(),
            noise_sigma: default_noise(),
            encoder_seed: default_encoder_seed(),
            encoder_gain: default_encoder_gain(),
            held_out: None,
            corrupt_patch: true,
            identity_encoder: false,
        }
    }

    pub fn held_out_count(&self) -> usize {
        self.held_out.unwrap_or(self.count / 5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(IfrError::config("dataset count must be at least 1"));
        }
        if self.channels == 0 {
            return Err(IfrError::config("dataset channels must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(IfrError::config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(self.encoder_gain > 0.0 && self.encoder_gain.is_finite()) {
            return Err(IfrError::config("encoder_gain must be finite and positive"));
        }
        if self.held_out_count() >= self.count {
            return Err(IfrError::config(format!(
                "held_out {} leaves no training samples out of {}",
                self.held_out_count(),
                self.count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `C x 14 x 14`.
    pub feature: Tensor,
    /// `1 x 28 x 28`, entries in {0, 1}.
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// The last `held_out` samples form the evaluation split.
    pub held_out: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, held_out: usize) -> Result<Self> {
        if held_out > samples.len() {
            return Err(IfrError::config(format!(
                "held_out {held_out} exceeds {} samples",
                samples.len()
            )));
        }
        Ok(Self { samples, held_out })
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.samples.len() - self.held_out]
    }

    pub fn evaluation(&self) -> &[Sample] {
        &self.samples[self.samples.len() - self.held_out..]
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.feature.shape()[0])
    }

    pub fn to_tensors(&self) -> Result<NamedTensors> {
        let features: Vec<Tensor> = self.samples.iter().map(|s| s.feature.clone()).collect();
        let masks: Vec<Tensor> = self.samples.iter().map(|s| s.mask.clone()).collect();
        Ok(vec![
            ("features".into(), Tensor::stack(&features)?),
            ("masks".into(), Tensor::stack(&masks)?),
            ("held_out".into(), Tensor::from_vec(vec![self.held_out as f64])),
        ])
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let features = find(tensors, "features")?;
        let masks = find(tensors, "masks")?;
        let held = find(tensors, "held_out")?;
        let n = match (features.shape(), masks.shape()) {
            ([n, _, FEATURE_SIDE, FEATURE_SIDE], [m, 1, MASK_SIDE, MASK_SIDE]) if n == m && *n > 0 => *n,
            (f, m) => {
                return Err(IfrError::shape(
                    "Dataset::from_tensors",
                    format!("features {f:?} and masks {m:?} do not describe one dataset"),
                ))
            }
        };
        let held_out = match held.data() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => *v as usize,
            other => {
                return Err(IfrError::shape(
                    "Dataset::from_tensors",
                    format!("held_out must be one non-negative integer, got {other:?}"),
                ))
            }
        };
        let samples = (0..n)
            .map(|i| {
                Ok(Sample {
                    feature: features.slice_leading(i)?,
                    mask: masks.slice_leading(i)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, held_out)
    }
}

/// Per-channel affine encoder `f_c = a_c p + b_c` with
/// `a_c ~ N(0, gain^2)` and `b_c ~ N(0, gain^2 / 4)`.
fn encoder(spec: &DatasetSpec) -> (Vec<f64>, Vec<f64>) {
    if spec.identity_encoder {
        let mut a = vec![0.0; spec.channels];
        a[0] = 1.0;
        return (a, vec![0.0; spec.channels]);
    }
    let mut rng = SplitMix64::new(spec.encoder_seed);
    let a = (0..spec.channels).map(|_| spec.encoder_gain * rng.normal()).collect();
    let b = (0..spec.channels).map(|_| 0.5 * spec.encoder_gain * rng.normal()).collect();
    (a, b)
}

fn random_region(family: ShapeFamily, rng: &mut SplitMix64) -> Region {
    match family {
        ShapeFamily::Ellipse => random_ellipse(rng, (4.0, 10.0)),
        ShapeFamily::Polygon => random_polygon(rng),
        ShapeFamily::TwoBlobUnion => random_two_blob(rng),
        ShapeFamily::Mixed => {
            let pick = [ShapeFamily::Ellipse, ShapeFamily::Polygon, ShapeFamily::TwoBlobUnion][rng.below(3)];
            random_region(pick, rng)
        }
    }
}

/// 2x2 average pooling of a 28x28 mask.
pub fn pool_mask(mask: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; FEATURE_SIDE * FEATURE_SIDE];
    for y in 0..FEATURE_SIDE {
        for x in 0..FEATURE_SIDE {
            let at = |dy: usize, dx: usize| mask[(2 * y + dy) * MASK_SIDE + 2 * x + dx];
            out[y * FEATURE_SIDE + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
        }
    }
    out
}

fn sample(spec: &DatasetSpec, index: usize, enc: &(Vec<f64>, Vec<f64>)) -> Sample {
    let mut rng = SplitMix64::substream(spec.seed, index as u64);
    let mask = random_region(spec.shape_family, &mut rng).rasterize();
    let pooled = pool_mask(&mask);

    let plane = FEATURE_SIDE * FEATURE_SIDE;
    let mut feature = vec![0.0; spec.channels * plane];
    for c in 0..spec.channels {
        for (i, p) in pooled.iter().enumerate() {
            feature[c * plane + i] = enc.0[c] * p + enc.1[c];
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in feature.iter_mut() {
            *v += spec.noise_sigma * rng.normal();
        }
    }
    if spec.corrupt_patch {
        // Centre the patch on a random foreground cell so it removes object
        // evidence rather than empty background.
        let fg: Vec<usize> = (0..plane).filter(|&i| pooled[i] > 0.0).collect();
        let centre = if fg.is_empty() { rng.below(plane) } else { fg[rng.below(fg.len())] };
        let max_corner = FEATURE_SIDE - PATCH_SIDE;
        let y0 = (centre / FEATURE_SIDE).saturating_sub(PATCH_SIDE / 2).min(max_corner);
        let x0 = (centre % FEATURE_SIDE).saturating_sub(PATCH_SIDE / 2).min(max_corner);
        for c in 0..spec.channels {
            for y in y0..y0 + PATCH_SIDE {
                for x in x0..x0 + PATCH_SIDE {
                    feature[c * plane + y * FEATURE_SIDE + x] = 0.0;
                }
            }
        }
    }
    Sample {
        feature: Tensor::new(vec![spec.channels, FEATURE_SIDE, FEATURE_SIDE], feature).expect("sized above"),
        mask: Tensor::new(vec![1, MASK_SIDE, MASK_SIDE], mask).expect("sized above"),
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let enc = encoder(spec);
    let samples = (0..spec.count).map(|i| sample(spec, i, &enc)).collect();
    Dataset::new(samples, spec.held_out_count())
}
