use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Concatenates `(N, H, W, Cᵢ)` tensors along the channel axis, in order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let [n, h, w, _] = first.nhwc()?;
    let mut widths = Vec::with_capacity(xs.len());
    for x in xs {
        let [xn, xh, xw, c] = x.nhwc()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(shape_err!("concat input {} disagrees with {} on N, H, W", x.shape(), first.shape()));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let pixels = n * h * w;
    let mut out = Vec::with_capacity(pixels * total);
    for p in 0..pixels {
        for (x, &c) in xs.iter().zip(&widths) {
            out.extend_from_slice(&x.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::from_vec(&[n, h, w, total], out)
}

/// Inverse of [`concat_channels`]: splits the channel axis into `widths`.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, h, w, c] = x.nhwc()?;
    if widths.iter().sum::<usize>() != c {
        return Err(shape_err!("split widths {widths:?} do not sum to {c} channels"));
    }
    let pixels = n * h * w;
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&wd| Vec::with_capacity(pixels * wd)).collect();
    for row in x.data().chunks(c) {
        let mut off = 0;
        for (part, &wd) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&row[off..off + wd]);
            off += wd;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &wd)| Tensor::from_vec(&[n, h, w, wd], data))
        .collect()
}

/// `(N, H, W, C)` → `(N, H·W·C)`.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.nhwc()?;
    x.clone().reshape(&[n, h * w * c])
}

pub fn unflatten<T: Scalar>(x: &Tensor<T>, dims: [usize; 4]) -> Result<Tensor<T>> {
    x.clone().reshape(&dims)
}
