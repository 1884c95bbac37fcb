use super::Tensor;
use crate::error::{IfrError, Result};

pub const DEFAULT_GN_GROUPS: usize = 32;
pub const DEFAULT_GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormParams {
    pub num_groups: usize,
    pub scale: Tensor,
    pub shift: Tensor,
    pub epsilon: f64,
}

impl GroupNormParams {
    /// Identity affine (`scale = 1`, `shift = 0`).
    pub fn new(channels: usize, num_groups: usize, epsilon: f64) -> Result<Self> {
        if num_groups == 0 || channels == 0 || !channels.is_multiple_of(num_groups) {
            return Err(IfrError::config(format!(
                "group norm: {channels} channels not divisible into {num_groups} groups"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(IfrError::config("group norm epsilon must be positive"));
        }
        Ok(Self {
            num_groups,
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            epsilon,
        })
    }

    /// Default grouping: 32 groups, or the largest divisor of `channels` below that.
    pub fn with_default_groups(channels: usize) -> Result<Self> {
        Self::new(channels, default_groups(channels), DEFAULT_GN_EPS)
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            num_groups: self.num_groups,
            scale: Tensor::zeros_like(&self.scale),
            shift: Tensor::zeros_like(&self.shift),
            epsilon: self.epsilon,
        }
    }

    pub fn num_learnable(&self) -> usize {
        self.scale.len() + self.shift.len()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("scale", &self.scale), ("shift", &self.shift)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.scale, &mut self.shift]
    }

    fn check(&self, x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        let (c, h, w) = x.dims3()?;
        if c != self.channels() {
            return Err(IfrError::shape(
                op,
                format!("input has {c} channels, norm configured for {}", self.channels()),
            ));
        }
        if c % self.num_groups != 0 {
            return Err(IfrError::config(format!(
                "group norm: {c} channels not divisible into {} groups",
                self.num_groups
            )));
        }
        Ok((c / self.num_groups, h * w))
    }
}

pub fn default_groups(channels: usize) -> usize {
    (1..=DEFAULT_GN_GROUPS.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Forward intermediates needed by the VJP.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    /// Pre-affine normalised values.
    pub normalized: Tensor,
    /// `1 / sqrt(var + eps)` per group.
    pub inv_std: Vec<f64>,
}

pub(crate) fn group_norm_cached(x: &Tensor, p: &GroupNormParams) -> Result<(Tensor, GroupNormCache)> {
    let (per_group, plane) = p.check(x, "group_norm")?;
    x.ensure_finite("group_norm")?;
    let n = per_group * plane;
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(p.num_groups);
    for g in normalized.data_mut().chunks_mut(n) {
        let mean = g.iter().sum::<f64>() / n as f64;
        let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + p.epsilon).sqrt();
        g.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    let mut out = normalized.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (s, b) = (p.scale.data()[c], p.shift.data()[c]);
        chunk.iter_mut().for_each(|v| *v = s * *v + b);
    }
    Ok((out, GroupNormCache { normalized, inv_std }))
}

/// Normalises each channel group to zero mean and unit variance, then applies
/// the per-channel affine.
pub fn group_norm(x: &Tensor, p: &GroupNormParams) -> Result<Tensor> {
    group_norm_cached(x, p).map(|(y, _)| y)
}

/// The pre-affine normalised values.
pub fn group_norm_normalized(x: &Tensor, p: &GroupNormParams) -> Result<Tensor> {
    group_norm_cached(x, p).map(|(_, c)| c.normalized)
}

pub(crate) fn group_norm_backward(
    cache: &GroupNormCache,
    p: &GroupNormParams,
    cotangent: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<GroupNormParams>)> {
    cache.normalized.ensure_same_shape(cotangent, "group_norm_vjp")?;
    let (per_group, plane) = p.check(cotangent, "group_norm_vjp")?;
    let n = per_group * plane;
    let xhat = cache.normalized.data();
    let dy = cotangent.data();

    let dp = want_params.then(|| {
        let mut dp = p.zeros_like();
        for c in 0..p.channels() {
            let r = c * plane..(c + 1) * plane;
            dp.scale.data_mut()[c] = dy[r.clone()].iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
            dp.shift.data_mut()[c] = dy[r].iter().sum();
        }
        dp
    });

    let mut dx = vec![0.0; cotangent.len()];
    for g in 0..p.num_groups {
        let r = g * n..(g + 1) * n;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for (i, idx) in r.clone().enumerate() {
            let c = g * per_group + i / plane;
            let d = dy[idx] * p.scale.data()[c];
            dx[idx] = d;
            sum_d += d;
            sum_dx += d * xhat[idx];
        }
        let inv = cache.inv_std[g];
        let nf = n as f64;
        for idx in r {
            dx[idx] = inv / nf * (nf * dx[idx] - sum_d - xhat[idx] * sum_dx);
        }
    }
    Ok((Tensor::new(cotangent.shape().to_vec(), dx)?, dp))
}

/// VJP of [`group_norm`]; exact through the group mean and variance.
pub fn group_norm_vjp(x: &Tensor, p: &GroupNormParams, cotangent: &Tensor) -> Result<(Tensor, GroupNormParams)> {
    x.ensure_same_shape(cotangent, "group_norm_vjp")?;
    let (_, cache) = group_norm_cached(x, p)?;
    let (dx, dp) = group_norm_backward(&cache, p, cotangent, true)?;
    Ok((dx, dp.expect("requested")))
}
