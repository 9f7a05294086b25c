//! Batch normalisation over the last (channel) axis.
//!
//! Works on any tensor of rank ≥ 2 whose last axis is the channel axis, so
//! it covers both `(N, H, W, C)` feature maps and `(N, F)` dense activations.
//! Statistics are taken over every non-channel element (biased variance).

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct BatchNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Unit scale, zero shift, zero mean and unit variance.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], T::one()).expect("channels >= 1"),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()).expect("channels >= 1"),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Per-batch state retained by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub input: Tensor<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<usize> {
    let c = *x.dims().last().ok_or_else(|| shape_err!("batch-norm input must have rank >= 2"))?;
    if x.rank() < 2 {
        return Err(shape_err!("batch-norm input must have rank >= 2, got {}", x.shape()));
    }
    if c != p.channels() {
        return Err(shape_err!("input has {c} channels, batch-norm has {}", p.channels()));
    }
    Ok(c)
}

fn affine<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], p: &BatchNormParams<T>) -> (Tensor<T>, Tensor<T>) {
    let c = mean.len();
    let mut normalized = x.clone();
    let mut out = x.clone();
    let (g, b) = (p.gamma.data(), p.beta.data());
    for (xn_row, y_row) in normalized.data_mut().chunks_mut(c).zip(out.data_mut().chunks_mut(c)) {
        for ch in 0..c {
            let xn = (xn_row[ch] - mean[ch]) * inv_std[ch];
            xn_row[ch] = xn;
            y_row[ch] = g[ch] * xn + b[ch];
        }
    }
    (normalized, out)
}

/// Normalises with batch statistics. The running statistics are not touched
/// here; fold the returned cache in with [`update_running_stats`].
pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = check(x, p)?;
    let n = x.dims()[0];
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let count = T::of((x.numel() / c) as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for ch in 0..c {
            let d = row[ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let eps = T::of(p.eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (normalized, out) = affine(x, &mean, &inv_std, p);
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Normalises with the running statistics.
pub fn batchnorm_forward_infer<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    check(x, p)?;
    let eps = T::of(p.eps);
    let inv_std: Vec<T> = p.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    Ok(affine(x, p.running_mean.data(), &inv_std, p).1)
}

/// Dispatches on `mode`; train mode also returns the cache.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    match mode {
        Mode::Train => batchnorm_forward_train(x, p).map(|(y, c)| (y, Some(c))),
        Mode::Infer => batchnorm_forward_infer(x, p).map(|y| (y, None)),
    }
}

/// `running = momentum · running + (1 − momentum) · batch`.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    cache: &BatchNormCache<T>,
    momentum: f64,
) {
    let (keep, take) = (T::of(momentum), T::of(1.0 - momentum));
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
        *r = keep * *r + take * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&cache.batch_var) {
        *r = keep * *r + take * b;
    }
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if upstream.shape() != cache.normalized.shape() {
        return Err(shape_err!(
            "upstream gradient {} does not match batch-norm output {}",
            upstream.shape(),
            cache.normalized.shape()
        ));
    }
    let c = gamma.numel();
    let count = T::of((upstream.numel() / c) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (dy_row, xn_row) in upstream.data().chunks(c).zip(cache.normalized.data().chunks(c)) {
        for ch in 0..c {
            dbeta[ch] += dy_row[ch];
            dgamma[ch] += dy_row[ch] * xn_row[ch];
        }
    }
    // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
    let scale: Vec<T> = (0..c).map(|ch| gamma.data()[ch] * cache.inv_std[ch] / count).collect();
    let mut dx = upstream.clone();
    for (dx_row, xn_row) in dx.data_mut().chunks_mut(c).zip(cache.normalized.data().chunks(c)) {
        for ch in 0..c {
            dx_row[ch] = scale[ch] * (count * dx_row[ch] - dbeta[ch] - xn_row[ch] * dgamma[ch]);
        }
    }
    Ok(BatchNormGrads {
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
        input: dx,
    })
}
