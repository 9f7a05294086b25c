use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Mode;

/// `max(0, z)` elementwise.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != upstream.shape() {
        return Err(shape_err!("relu upstream {} does not match input {}", upstream.shape(), x.shape()));
    }
    let mut out = upstream.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

/// Inverted-dropout keep mask: each entry is `0` or `1 / (1 − rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T: Scalar> {
    pub scale: Tensor<T>,
}

/// Inverted dropout. Infer mode, and rate 0, are the identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Range(format!("dropout rate {rate} not in [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let draws = (0..x.numel()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    let scale = Tensor::from_vec(x.dims(), draws)?;
    let out = x.mul(&scale)?;
    Ok((out, Some(DropoutMask { scale })))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&DropoutMask<T>>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(upstream.clone()),
        Some(m) if m.scale.shape() == upstream.shape() => upstream.mul(&m.scale),
        Some(m) => Err(shape_err!("dropout mask {} does not match upstream {}", m.scale.shape(), upstream.shape())),
    }
}
