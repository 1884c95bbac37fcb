use std::borrow::Cow;

use super::Tensor;
use crate::error::{IfrError, Result};

/// Smallest per-channel direction norm the weight-norm reparameterisation accepts.
pub const DIRECTION_NORM_FLOOR: f64 = 1e-12;

/// Convolution kernel laid out `out x in x kh x kw`, with an optional
/// weight-norm reparameterisation `gain[c] * direction[c] / |direction[c]|`.
///
/// The same struct carries gradients: a gradient record has the shapes of the
/// parameters it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub direction: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
    pub weight_norm: bool,
}

impl ConvParams {
    /// Plain kernel with bias; no weight normalisation.
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        Self::build(kernel, None, bias)
    }

    /// Weight-normalised kernel.
    pub fn with_weight_norm(direction: Tensor, gain: Tensor, bias: Tensor) -> Result<Self> {
        Self::build(direction, Some(gain), bias)
    }

    fn build(direction: Tensor, gain: Option<Tensor>, bias: Tensor) -> Result<Self> {
        if direction.rank() != 4 {
            return Err(IfrError::shape(
                "ConvParams",
                format!("kernel must be out x in x kh x kw, got {:?}", direction.shape()),
            ));
        }
        let out = direction.shape()[0];
        if bias.shape() != [out] {
            return Err(IfrError::shape(
                "ConvParams",
                format!("bias must have {out} entries, got {:?}", bias.shape()),
            ));
        }
        let weight_norm = gain.is_some();
        let gain = gain.unwrap_or_else(|| Tensor::zeros(&[out]));
        if gain.shape() != [out] {
            return Err(IfrError::shape(
                "ConvParams",
                format!("gain must have {out} entries, got {:?}", gain.shape()),
            ));
        }
        let mut p = Self {
            direction,
            gain,
            bias,
            weight_norm,
        };
        if weight_norm {
            p.enforce_direction_floor();
        }
        Ok(p)
    }

    /// All-zero record with the same layout, used for gradients and momentum.
    pub fn zeros_like(&self) -> Self {
        Self {
            direction: Tensor::zeros_like(&self.direction),
            gain: Tensor::zeros_like(&self.gain),
            bias: Tensor::zeros_like(&self.bias),
            weight_norm: self.weight_norm,
        }
    }

    /// `(out, in, kh, kw)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.direction.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn fan(&self) -> usize {
        let (_, cin, kh, kw) = self.dims();
        cin * kh * kw
    }

    /// Norms of the per-output-channel direction slices, floored.
    pub fn direction_norms(&self) -> Vec<f64> {
        let fan = self.fan();
        self.direction
            .data()
            .chunks(fan)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt().max(DIRECTION_NORM_FLOOR))
            .collect()
    }

    /// The kernel actually convolved with the input.
    pub fn effective_kernel(&self) -> Cow<'_, Tensor> {
        if !self.weight_norm {
            return Cow::Borrowed(&self.direction);
        }
        let fan = self.fan();
        let norms = self.direction_norms();
        let mut k = self.direction.clone();
        for (c, chunk) in k.data_mut().chunks_mut(fan).enumerate() {
            let s = self.gain.data()[c] / norms[c];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Cow::Owned(k)
    }

    /// Keeps every direction slice away from zero norm.
    pub fn enforce_direction_floor(&mut self) {
        let fan = self.fan();
        for chunk in self.direction.data_mut().chunks_mut(fan) {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < DIRECTION_NORM_FLOOR {
                chunk[0] = DIRECTION_NORM_FLOOR;
            }
        }
    }

    /// Number of learnable values (gain only counts under weight norm).
    pub fn num_learnable(&self) -> usize {
        self.direction.len() + self.bias.len() + if self.weight_norm { self.gain.len() } else { 0 }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("direction", &self.direction), ("bias", &self.bias)];
        if self.weight_norm {
            v.push(("gain", &self.gain));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.direction, &mut self.bias];
        if self.weight_norm {
            v.push(&mut self.gain);
        }
        v
    }

    /// Pulls a gradient w.r.t. the effective kernel back onto direction and gain.
    fn chain_weight_norm(&self, d_eff: Tensor) -> (Tensor, Tensor) {
        if !self.weight_norm {
            return (d_eff, Tensor::zeros_like(&self.gain));
        }
        let fan = self.fan();
        let norms = self.direction_norms();
        let mut d_dir = d_eff;
        let mut d_gain = Tensor::zeros_like(&self.gain);
        for (c, (g_chunk, v_chunk)) in d_dir
            .data_mut()
            .chunks_mut(fan)
            .zip(self.direction.data().chunks(fan))
            .enumerate()
        {
            let n = norms[c];
            let proj: f64 = g_chunk.iter().zip(v_chunk).map(|(g, v)| g * v).sum::<f64>() / n;
            d_gain.data_mut()[c] = proj;
            let s = self.gain.data()[c] / n;
            for (g, v) in g_chunk.iter_mut().zip(v_chunk) {
                *g = s * (*g - proj * v / n);
            }
        }
        (d_dir, d_gain)
    }
}

/// Visits every contiguous run of (output offset, input offset, length) for
/// one kernel tap. With stride 1 the runs cover whole output rows.
#[inline]
fn for_each_run(
    (oh, ow): (usize, usize),
    (h, w): (usize, usize),
    (ky, kx): (usize, usize),
    stride: usize,
    padding: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    for oy in 0..oh {
        let iy = oy * stride + ky;
        if iy < padding || iy - padding >= h {
            continue;
        }
        let iy = iy - padding;
        if stride == 1 {
            let lo = padding.saturating_sub(kx);
            let hi = ow.min((w + padding).saturating_sub(kx));
            if lo < hi {
                f(oy * ow + lo, iy * w + lo + kx - padding, hi - lo);
            }
        } else {
            for ox in 0..ow {
                let ix = ox * stride + kx;
                if ix < padding || ix - padding >= w {
                    continue;
                }
                f(oy * ow + ox, iy * w + ix - padding, 1);
            }
        }
    }
}

fn conv_output_dims(
    x: &Tensor,
    p: &ConvParams,
    stride: usize,
    padding: usize,
    op: &'static str,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, w) = x.dims3()?;
    let (_, kcin, kh, kw) = p.dims();
    if cin != kcin {
        return Err(IfrError::shape(
            op,
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    if stride == 0 {
        return Err(IfrError::shape(op, "stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(IfrError::shape(
            op,
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
        ));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok((cin, h, w, oh, ow))
}

/// Cross-correlation with zero padding plus a per-channel bias.
pub fn conv2d(x: &Tensor, p: &ConvParams, stride: usize, padding: usize) -> Result<Tensor> {
    let (cin, h, w, oh, ow) = conv_output_dims(x, p, stride, padding, "conv2d")?;
    x.ensure_finite("conv2d")?;
    let (cout, _, kh, kw) = p.dims();
    let kernel = p.effective_kernel();
    let k = kernel.data();
    let xd = x.data();
    let mut out = vec![0.0; cout * oh * ow];
    for (co, out_c) in out.chunks_mut(oh * ow).enumerate() {
        out_c.fill(p.bias.data()[co]);
        for ci in 0..cin {
            let x_c = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for_each_run((oh, ow), (h, w), (ky, kx), stride, padding, |o, i, n| {
                        for (dst, src) in out_c[o..o + n].iter_mut().zip(&x_c[i..i + n]) {
                            *dst += wv * src;
                        }
                    });
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Shared backward pass; callers that only need one side skip the other.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    p: &ConvParams,
    stride: usize,
    padding: usize,
    cotangent: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor>, Option<ConvParams>)> {
    let (cin, h, w, oh, ow) = conv_output_dims(x, p, stride, padding, "conv2d_vjp")?;
    let (cout, _, kh, kw) = p.dims();
    if cotangent.shape() != [cout, oh, ow] {
        return Err(IfrError::shape(
            "conv2d_vjp",
            format!(
                "cotangent {:?} does not match output [{cout}, {oh}, {ow}]",
                cotangent.shape()
            ),
        ));
    }
    let kernel = p.effective_kernel();
    let k = kernel.data();
    let xd = x.data();
    let dy = cotangent.data();

    let dx = want_input.then(|| {
        let mut dx = vec![0.0; cin * h * w];
        for co in 0..cout {
            let dy_c = &dy[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for_each_run((oh, ow), (h, w), (ky, kx), stride, padding, |o, i, n| {
                            for (dst, src) in dx_c[i..i + n].iter_mut().zip(&dy_c[o..o + n]) {
                                *dst += wv * src;
                            }
                        });
                    }
                }
            }
        }
        Tensor::new(vec![cin, h, w], dx)
    });

    let dp = want_params.then(|| {
        let mut dk = vec![0.0; cout * cin * kh * kw];
        let mut db = vec![0.0; cout];
        for co in 0..cout {
            let dy_c = &dy[co * oh * ow..(co + 1) * oh * ow];
            db[co] = dy_c.iter().sum();
            for ci in 0..cin {
                let x_c = &xd[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for_each_run((oh, ow), (h, w), (ky, kx), stride, padding, |o, i, n| {
                            acc += dy_c[o..o + n]
                                .iter()
                                .zip(&x_c[i..i + n])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        });
                        dk[((co * cin + ci) * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        }
        let d_eff = Tensor::new(p.direction.shape().to_vec(), dk)?;
        let (direction, gain) = p.chain_weight_norm(d_eff);
        Ok::<_, IfrError>(ConvParams {
            direction,
            gain,
            bias: Tensor::from_vec(db),
            weight_norm: p.weight_norm,
        })
    });

    Ok((dx.transpose()?, dp.transpose()?))
}

/// VJP of [`conv2d`]: adjoints for the input and every parameter leaf.
pub fn conv2d_vjp(
    x: &Tensor,
    p: &ConvParams,
    stride: usize,
    padding: usize,
    cotangent: &Tensor,
) -> Result<(Tensor, ConvParams)> {
    let (dx, dp) = conv2d_backward(x, p, stride, padding, cotangent, true, true)?;
    Ok((dx.expect("requested"), dp.expect("requested")))
}

/// Pointwise channel mixing.
pub fn conv1x1(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_kernel(p, 1, "conv1x1")?;
    conv2d(x, p, 1, 0)
}

pub fn conv1x1_vjp(x: &Tensor, p: &ConvParams, cotangent: &Tensor) -> Result<(Tensor, ConvParams)> {
    check_kernel(p, 1, "conv1x1_vjp")?;
    conv2d_vjp(x, p, 1, 0, cotangent)
}

fn check_kernel(p: &ConvParams, size: usize, op: &'static str) -> Result<()> {
    let (_, _, kh, kw) = p.dims();
    if kh != size || kw != size {
        return Err(IfrError::shape(
            op,
            format!("expected a {size}x{size} kernel, got {kh}x{kw}"),
        ));
    }
    Ok(())
}

/// Stride-2 transposed convolution with a 2x2 kernel laid out `out x in x 2 x 2`:
/// `y[o, 2i+a, 2j+b] = bias[o] + sum_c k[o, c, a, b] * x[c, i, j]`.
pub fn deconv2x2(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_kernel(p, 2, "deconv2x2")?;
    let (cin, h, w) = x.dims3()?;
    let (cout, kcin, _, _) = p.dims();
    if cin != kcin {
        return Err(IfrError::shape(
            "deconv2x2",
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    x.ensure_finite("deconv2x2")?;
    let kernel = p.effective_kernel();
    let k = kernel.data();
    let xd = x.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; cout * oh * ow];
    for (co, out_c) in out.chunks_mut(oh * ow).enumerate() {
        out_c.fill(p.bias.data()[co]);
        for ci in 0..cin {
            let x_c = &xd[ci * h * w..(ci + 1) * h * w];
            let base = (co * cin + ci) * 4;
            let taps = [k[base], k[base + 1], k[base + 2], k[base + 3]];
            for i in 0..h {
                for a in 0..2 {
                    let row = &mut out_c[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                    let (t0, t1) = (taps[2 * a], taps[2 * a + 1]);
                    for (j, &v) in x_c[i * w..(i + 1) * w].iter().enumerate() {
                        row[2 * j] += t0 * v;
                        row[2 * j + 1] += t1 * v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

pub(crate) fn deconv2x2_backward(
    x: &Tensor,
    p: &ConvParams,
    cotangent: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor>, Option<ConvParams>)> {
    check_kernel(p, 2, "deconv2x2_vjp")?;
    let (cin, h, w) = x.dims3()?;
    let (cout, kcin, _, _) = p.dims();
    let (oh, ow) = (2 * h, 2 * w);
    if cin != kcin || cotangent.shape() != [cout, oh, ow] {
        return Err(IfrError::shape(
            "deconv2x2_vjp",
            format!(
                "input {:?}, kernel {:?}, cotangent {:?}",
                x.shape(),
                p.direction.shape(),
                cotangent.shape()
            ),
        ));
    }
    let kernel = p.effective_kernel();
    let k = kernel.data();
    let xd = x.data();
    let dy = cotangent.data();

    let dx = want_input.then(|| {
        let mut dx = vec![0.0; cin * h * w];
        for co in 0..cout {
            let dy_c = &dy[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let base = (co * cin + ci) * 4;
                let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
                for i in 0..h {
                    for a in 0..2 {
                        let row = &dy_c[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        let (t0, t1) = (k[base + 2 * a], k[base + 2 * a + 1]);
                        for (j, d) in dx_c[i * w..(i + 1) * w].iter_mut().enumerate() {
                            *d += t0 * row[2 * j] + t1 * row[2 * j + 1];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![cin, h, w], dx)
    });

    let dp = want_params.then(|| {
        let mut dk = vec![0.0; cout * cin * 4];
        let mut db = vec![0.0; cout];
        for co in 0..cout {
            let dy_c = &dy[co * oh * ow..(co + 1) * oh * ow];
            db[co] = dy_c.iter().sum();
            for ci in 0..cin {
                let x_c = &xd[ci * h * w..(ci + 1) * h * w];
                let base = (co * cin + ci) * 4;
                for i in 0..h {
                    for a in 0..2 {
                        let row = &dy_c[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for (j, &v) in x_c[i * w..(i + 1) * w].iter().enumerate() {
                            dk[base + 2 * a] += row[2 * j] * v;
                            dk[base + 2 * a + 1] += row[2 * j + 1] * v;
                        }
                    }
                }
            }
        }
        let d_eff = Tensor::new(p.direction.shape().to_vec(), dk)?;
        let (direction, gain) = p.chain_weight_norm(d_eff);
        Ok::<_, IfrError>(ConvParams {
            direction,
            gain,
            bias: Tensor::from_vec(db),
            weight_norm: p.weight_norm,
        })
    });

    Ok((dx.transpose()?, dp.transpose()?))
}

pub fn deconv2x2_vjp(x: &Tensor, p: &ConvParams, cotangent: &Tensor) -> Result<(Tensor, ConvParams)> {
    let (dx, dp) = deconv2x2_backward(x, p, cotangent, true, true)?;
    Ok((dx.expect("requested"), dp.expect("requested")))
}
