//! Adam with bias correction, and the piecewise-constant epoch schedule.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like every parameter in `store`.
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: IndexMap<String, Tensor<T>> =
            store.params().map(|(k, p)| (k.to_string(), Tensor::zeros(p.dims()))).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam update of every parameter that has a gradient:
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
    /// θ ← θ − lr · m̂ / (√v̂ + ε)   with m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
    /// ```
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Range(format!("learning rate must be positive, got {lr}")));
        }
        for (name, g) in grads.iter() {
            let m = self
                .m
                .get(name)
                .ok_or_else(|| Error::Config(format!("no optimizer state for {name}")))?;
            if m.shape() != g.shape() {
                return Err(shape_err!("gradient for {name} is {}, parameter is {}", g.shape(), m.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr, eps) = (T::of(lr), T::of(eps));

        for (name, g) in grads.iter() {
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("moment maps share keys");
            let theta = store.param_mut(name)?;
            for (((p, mi), vi), &gi) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One constant-rate stretch of the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
}

/// Ordered list of `(epochs, learning rate)` phases.
///
/// The text form is `5x0.001,3x0.0001,3x0.00004`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    phases: Vec<Phase>,
}

impl Default for LrSchedule {
    /// Five epochs at 1e-3, three at 1e-4, three at 4e-5.
    fn default() -> Self {
        LrSchedule {
            phases: vec![
                Phase { epochs: 5, lr: 0.001 },
                Phase { epochs: 3, lr: 0.0001 },
                Phase { epochs: 3, lr: 0.00004 },
            ],
        }
    }
}

impl LrSchedule {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::Config("learning-rate schedule has no phases".into()));
        }
        for p in &phases {
            if p.epochs == 0 || !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::Config(format!("invalid schedule phase {}x{}", p.epochs, p.lr)));
            }
        }
        Ok(LrSchedule { phases })
    }

    /// A single phase of `epochs` at a constant rate.
    pub fn constant(epochs: usize, lr: f64) -> Result<Self> {
        Self::new(vec![Phase { epochs, lr }])
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Rate for a 1-based epoch number.
    pub fn lr_for_epoch(&self, epoch: usize) -> Result<f64> {
        let mut end = 0;
        for p in &self.phases {
            end += p.epochs;
            if epoch >= 1 && epoch <= end {
                return Ok(p.lr);
            }
        }
        Err(Error::Range(format!("epoch {epoch} outside schedule of {} epochs", self.total_epochs())))
    }

    /// Index of the phase containing a 1-based epoch.
    pub fn phase_of(&self, epoch: usize) -> Option<usize> {
        let mut end = 0;
        self.phases.iter().position(|p| {
            end += p.epochs;
            epoch >= 1 && epoch <= end
        })
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.phases.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}x{}", p.epochs, p.lr)?;
        }
        Ok(())
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let phases = s
            .split(',')
            .map(|part| {
                let part = part.trim();
                let (count, lr) = part
                    .split_once(['x', 'X'])
                    .ok_or_else(|| Error::Config(format!("schedule phase `{part}` is not COUNTxRATE")))?;
                let epochs = count
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad epoch count in `{part}`")))?;
                let lr = lr
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad learning rate in `{part}`")))?;
                Ok(Phase { epochs, lr })
            })
            .collect::<Result<Vec<_>>>()?;
        LrSchedule::new(phases)
    }
}
