//! Softmax, categorical cross-entropy and the L2-regularised objective
//!
//! `J = (1/m) Σ L(ŷ, y) + (λ / 2m) Σ ‖W‖²`
//!
//! where the penalty runs over the configured dense kernels only.

use crate::error::{shape_err, Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Floor applied to the true-class probability inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub regularized: Vec<String>,
}

impl LossConfig {
    pub fn unregularized() -> Self {
        LossConfig {
            lambda: 0.0,
            regularized: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Mean cross-entropy over the batch.
    pub data_loss: f64,
    /// `(λ / 2m) Σ ‖W‖²`.
    pub reg_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Samples whose true-class probability fell below [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c] = logits.rows_cols()?;
    if !logits.all_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(shape_err!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Range(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Mean of `−log p[true]` over the batch.
pub fn cce<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy> {
    let [n, c] = probs.rows_cols()?;
    check_labels(labels, n, c)?;
    let mut clamped = 0;
    let mut total = 0.0;
    for (row, &label) in probs.data().chunks(c).zip(labels) {
        let p = row[label].as_f64();
        if p < PROB_FLOOR {
            clamped += 1;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    if clamped > 0 {
        log::warn!("{clamped} true-class probabilities clamped at {PROB_FLOOR:e}");
    }
    Ok(CrossEntropy {
        loss: total / n as f64,
        clamped,
    })
}

/// `−Σ tᵢ log pᵢ`, averaged over the batch, for dense (e.g. one-hot) targets.
pub fn cce_one_hot<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<CrossEntropy> {
    let [n, _] = probs.rows_cols()?;
    if probs.shape() != targets.shape() {
        return Err(shape_err!("targets {} do not match probabilities {}", targets.shape(), probs.shape()));
    }
    let mut clamped = 0;
    let mut total = 0.0;
    for (&p, &t) in probs.data().iter().zip(targets.data()) {
        let (p, t) = (p.as_f64(), t.as_f64());
        if t != 0.0 {
            if p < PROB_FLOOR {
                clamped += 1;
            }
            total -= t * p.max(PROB_FLOOR).ln();
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} target probabilities clamped at {PROB_FLOOR:e}");
    }
    Ok(CrossEntropy {
        loss: total / n as f64,
        clamped,
    })
}

/// `(λ / 2m) Σ ‖W‖²` over the configured kernels.
pub fn l2_penalty<T: Scalar>(store: &ParamStore<T>, cfg: &LossConfig, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Range("batch size m must be at least 1".into()));
    }
    if cfg.lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {}", cfg.lambda)));
    }
    let mut sq = 0.0;
    for name in &cfg.regularized {
        sq += store.param(name)?.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
    }
    Ok(cfg.lambda / (2.0 * m as f64) * sq)
}

/// Adds `(λ / m) W` to the gradient of every regularised kernel.
pub fn add_l2_gradient<T: Scalar>(
    store: &ParamStore<T>,
    grads: &mut Gradients<T>,
    cfg: &LossConfig,
    m: usize,
) -> Result<()> {
    if cfg.lambda == 0.0 {
        return Ok(());
    }
    let scale = T::of(cfg.lambda / m as f64);
    for name in &cfg.regularized {
        let w = store.param(name)?;
        match grads.get_mut(name) {
            Some(g) => g.axpy(scale, w)?,
            None => grads.accumulate(name, w.map(|v| v * scale))?,
        }
    }
    Ok(())
}

/// Total objective and its gradient with respect to the logits.
///
/// The logit gradient is the fused softmax-CCE derivative
/// `(softmax(s) − onehot(y)) / N`; the L2 part of the gradient belongs to
/// the kernels and is applied separately by [`add_l2_gradient`].
pub fn loss_and_logit_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    store: &ParamStore<T>,
    cfg: &LossConfig,
) -> Result<(LossReport, Tensor<T>)> {
    let [n, c] = logits.rows_cols()?;
    check_labels(labels, n, c)?;
    let probs = softmax(logits)?;
    // log-sum-exp form of −log p[true]; avoids the probability floor.
    let mut data_loss = 0.0;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
        data_loss += lse - row[label].as_f64();
    }
    data_loss /= n as f64;
    let reg_loss = l2_penalty(store, cfg, n)?;

    let inv_n = T::of(1.0 / n as f64);
    let mut grad = probs;
    for (row, &label) in grad.data_mut().chunks_mut(c).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok((
        LossReport {
            data_loss,
            reg_loss,
            total: data_loss + reg_loss,
        },
        grad,
    ))
}
