use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Pads with −∞ so that the output extent is `ceil(input / stride)`.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl PoolGeometry {
    /// 2×2 window, stride 2, no padding.
    pub const HALVING: PoolGeometry = PoolGeometry {
        window: 2,
        stride: 2,
        padding: Padding::Valid,
    };

    /// 3×3 window, stride 1, same padding.
    pub const SAME_3X3: PoolGeometry = PoolGeometry {
        window: 3,
        stride: 1,
        padding: Padding::Same,
    };

    /// Output extent along one axis of length `len`.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 {
            return Err(shape_err!("pool window and stride must be positive"));
        }
        match self.padding {
            Padding::Same => Ok(len.div_ceil(self.stride)),
            Padding::Valid if len >= self.window => Ok((len - self.window) / self.stride + 1),
            Padding::Valid => Err(shape_err!("input extent {len} smaller than pool window {}", self.window)),
        }
    }

    /// Leading and trailing padding along an axis of length `len`.
    fn pads(&self, len: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Valid => Ok((0, 0)),
            Padding::Same => {
                let out = self.output_len(len)?;
                let total = ((out - 1) * self.stride + self.window).saturating_sub(len);
                Ok((total / 2, total - total / 2))
            }
        }
    }
}

/// For every output element, the flat index of the input element that won.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_dims: [usize; 4],
    winners: Vec<usize>,
}

impl ArgmaxMap {
    pub fn winners(&self) -> &[usize] {
        &self.winners
    }
}

/// Channelwise max pooling over `(N, H, W, C)`. Ties go to the first element
/// in row-major window order.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry) -> Result<(Tensor<T>, ArgmaxMap)> {
    let [n, h, w, c] = x.nhwc()?;
    let (out_h, out_w) = (geom.output_len(h)?, geom.output_len(w)?);
    let (top, bottom) = geom.pads(h)?;
    let (left, right) = geom.pads(w)?;
    let padded;
    let (src, ph, pw) = if top + bottom + left + right > 0 {
        padded = x.pad_spatial(top, bottom, left, right, T::neg_infinity())?;
        (padded.data(), h + top + bottom, w + left + right)
    } else {
        (x.data(), h, w)
    };

    let mut out = vec![T::neg_infinity(); n * out_h * out_w * c];
    let mut winners = vec![0usize; out.len()];
    let mut best_padded = vec![0usize; c];
    for b in 0..n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let o = ((b * out_h + oy) * out_w + ox) * c;
                let best = &mut out[o..o + c];
                for (ch, slot) in best_padded.iter_mut().enumerate() {
                    *slot = ((oy * geom.stride + top) * pw + ox * geom.stride + left) * c + ch;
                }
                for ky in 0..geom.window {
                    let y = oy * geom.stride + ky;
                    for kx in 0..geom.window {
                        let xx = ox * geom.stride + kx;
                        let i = ((b * ph + y) * pw + xx) * c;
                        for ch in 0..c {
                            let v = src[i + ch];
                            if v > best[ch] {
                                best[ch] = v;
                                best_padded[ch] = (y * pw + xx) * c + ch;
                            }
                        }
                    }
                }
                for ch in 0..c {
                    let flat = best_padded[ch];
                    let (y, xx) = (flat / (pw * c), (flat / c) % pw);
                    winners[o + ch] = ((b * h + (y - top)) * w + (xx - left)) * c + ch;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, out_h, out_w, c], out)?,
        ArgmaxMap {
            input_dims: [n, h, w, c],
            winners,
        },
    ))
}

/// Routes each upstream value to its winning input, accumulating where
/// windows overlap.
pub fn maxpool_backward<T: Scalar>(map: &ArgmaxMap, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.numel() != map.winners.len() {
        return Err(shape_err!(
            "upstream gradient has {} elements, pool output had {}",
            upstream.numel(),
            map.winners.len()
        ));
    }
    let mut dx = Tensor::zeros(&map.input_dims);
    let d = dx.data_mut();
    for (&i, &g) in map.winners.iter().zip(upstream.data()) {
        d[i] += g;
    }
    Ok(dx)
}
