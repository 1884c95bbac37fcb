use super::{init_conv, ParamSet};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::{conv2d, deconv2x2, deconv2x2_backward, relu, relu_vjp, ConvParams, Tensor};
use crate::tensor::conv2d_backward;

/// Mask-predictor tail: 2x2 stride-2 deconvolution, ReLU, 1x1 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub deconv: ConvParams,
    pub logits: ConvParams,
}

#[derive(Debug, Clone)]
pub struct PredictorTape {
    input: Tensor,
    upsampled: Tensor,
    act: Tensor,
    pub logits: Tensor,
}

impl PredictorParams {
    pub fn init(channels: usize, classes: usize, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            deconv: init_conv(rng, channels, channels, 2, false)?,
            logits: init_conv(rng, classes, channels, 1, false)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            deconv: self.deconv.zeros_like(),
            logits: self.logits.zeros_like(),
        }
    }

    pub fn record(&self, h: &Tensor) -> Result<PredictorTape> {
        let upsampled = deconv2x2(h, &self.deconv)?;
        let act = relu(&upsampled);
        let logits = conv2d(&act, &self.logits, 1, 0)?;
        Ok(PredictorTape {
            input: h.clone(),
            upsampled,
            act,
            logits,
        })
    }

    pub fn backward(&self, tape: &PredictorTape, cotangent: &Tensor) -> Result<(Tensor, PredictorParams)> {
        let (d_act, d_logits) = conv2d_backward(&tape.act, &self.logits, 1, 0, cotangent, true, true)?;
        let d_up = relu_vjp(&tape.upsampled, &d_act.expect("requested"))?;
        let (d_h, d_deconv) = deconv2x2_backward(&tape.input, &self.deconv, &d_up, true, true)?;
        Ok((
            d_h.expect("requested"),
            PredictorParams {
                deconv: d_deconv.expect("requested"),
                logits: d_logits.expect("requested"),
            },
        ))
    }
}

impl ParamSet for PredictorParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .deconv
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("deconv.{n}"), t))
            .collect();
        out.extend(self.logits.tensors().into_iter().map(|(n, t)| (format!("logits.{n}"), t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.deconv.tensors_mut();
        out.extend(self.logits.tensors_mut());
        out
    }
}

pub fn mask_predictor_forward(p: &PredictorParams, h: &Tensor) -> Result<Tensor> {
    Ok(p.record(h)?.logits)
}

/// Returns `(dH, dParams)`.
pub fn mask_predictor_vjp(p: &PredictorParams, h: &Tensor, cotangent: &Tensor) -> Result<(Tensor, PredictorParams)> {
    let tape = p.record(h)?;
    p.backward(&tape, cotangent)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_give_zero_logits() {
        let p = PredictorParams::init(4, 1, &mut SplitMix64::new(1)).unwrap().zeros_like();
        let h = Tensor::full(&[4, 14, 14], 0.7);
        let y = mask_predictor_forward(&p, &h).unwrap();
        assert_eq!(y.shape(), &[1, 28, 28]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn extent_doubles() {
        let p = PredictorParams::init(3, 2, &mut SplitMix64::new(2)).unwrap();
        let y = mask_predictor_forward(&p, &Tensor::zeros(&[3, 14, 14])).unwrap();
        assert_eq!(y.shape(), &[2, 28, 28]);
        assert!(mask_predictor_forward(&p, &Tensor::zeros(&[4, 14, 14])).is_err());
    }
}
