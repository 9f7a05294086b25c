//! Stride-1, zero "same"-padded 2-D convolution (cross-correlation, no kernel
//! flip) lowered to GEMM through im2col.
//!
//! The im2col row for output pixel `(n, y, x)` lists the receptive field in
//! `(ky, kx, c_in)` order, which is exactly the row-major flattening of a
//! `(kh, kw, C_in, C_out)` kernel viewed as a `(kh·kw·C_in) × C_out` matrix.

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Upper bound on the number of im2col elements materialised at once.
const COLS_BUDGET: usize = 1 << 23;

#[derive(Debug, Clone)]
pub struct ConvParams<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    /// Samples per im2col chunk.
    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.pixels() * self.k()).max(1)).clamp(1, self.n)
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Geometry> {
    let [n, h, w, cin] = x.nhwc()?;
    let [kh, kw, kcin, cout] = kernel.nhwc()?;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape_err!("same padding needs odd kernel extents, got {kh}x{kw}"));
    }
    if kcin != cin {
        return Err(shape_err!("input has {cin} channels but kernel expects {kcin}"));
    }
    if bias.dims() != [cout] {
        return Err(shape_err!("bias shape {} does not match {cout} output channels", bias.shape()));
    }
    Ok(Geometry { n, h, w, cin, kh, kw, cout })
}

/// Fills `cols` with the receptive fields of samples `n0..n0+count`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, n0: usize, count: usize, cols: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let k = g.k();
    let mut row = 0;
    for b in n0..n0 + count {
        for oy in 0..g.h {
            for ox in 0..g.w {
                let dst_row = &mut cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = oy as isize + ky as isize - ph as isize;
                    for kx in 0..g.kw {
                        let ix = ox as isize + kx as isize - pw as isize;
                        let dst = &mut dst_row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            dst.fill(T::zero());
                        } else {
                            let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                            dst.copy_from_slice(&x[src..src + g.cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds column gradients back onto the input gradient.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, n0: usize, count: usize, dx: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let k = g.k();
    let mut row = 0;
    for b in n0..n0 + count {
        for oy in 0..g.h {
            for ox in 0..g.w {
                let src_row = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = oy as isize + ky as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = ox as isize + kx as isize - pw as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = &src_row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `(N, H, W, C_in)` → `(N, H, W, C_out)`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = geometry(x, &p.kernel, &p.bias)?;
    let k = g.k();
    let mut out = vec![T::zero(); g.n * g.pixels() * g.cout];
    for row in out.chunks_mut(g.cout) {
        row.copy_from_slice(p.bias.data());
    }
    let chunk = g.chunk();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); chunk * g.pixels() * k] };
    let mut n0 = 0;
    while n0 < g.n {
        let count = chunk.min(g.n - n0);
        let rows = count * g.pixels();
        let a: &[T] = if g.is_pointwise() {
            &x.data()[n0 * g.pixels() * k..(n0 + count) * g.pixels() * k]
        } else {
            im2col(x.data(), &g, n0, count, &mut cols);
            &cols[..rows * k]
        };
        let c = &mut out[n0 * g.pixels() * g.cout..(n0 + count) * g.pixels() * g.cout];
        gemm(false, false, rows, g.cout, k, T::one(), a, k, p.kernel.data(), g.cout, T::one(), c, g.cout);
        n0 += count;
    }
    Tensor::from_vec(&[g.n, g.h, g.w, g.cout], out)
}

/// Gradients of a same-padded convolution given the upstream gradient of
/// its output.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    upstream: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, &p.kernel, &p.bias)?;
    if upstream.dims() != [g.n, g.h, g.w, g.cout] {
        return Err(shape_err!(
            "upstream gradient {} does not match conv output ({}, {}, {}, {})",
            upstream.shape(),
            g.n,
            g.h,
            g.w,
            g.cout
        ));
    }
    let k = g.k();
    let dy = upstream.data();

    let mut bias_grad = vec![T::zero(); g.cout];
    for row in dy.chunks(g.cout) {
        for (b, &v) in bias_grad.iter_mut().zip(row) {
            *b += v;
        }
    }

    let mut kernel_grad = vec![T::zero(); k * g.cout];
    let mut input_grad = need_input_grad.then(|| vec![T::zero(); x.numel()]);
    let chunk = g.chunk();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); chunk * g.pixels() * k] };
    let mut n0 = 0;
    while n0 < g.n {
        let count = chunk.min(g.n - n0);
        let rows = count * g.pixels();
        let dy_chunk = &dy[n0 * g.pixels() * g.cout..(n0 + count) * g.pixels() * g.cout];
        let x_range = n0 * g.pixels() * g.cin..(n0 + count) * g.pixels() * g.cin;

        // dK += colsᵀ · dY
        let a: &[T] = if g.is_pointwise() {
            &x.data()[x_range.clone()]
        } else {
            im2col(x.data(), &g, n0, count, &mut cols);
            &cols[..rows * k]
        };
        gemm(true, false, k, g.cout, rows, T::one(), a, k, dy_chunk, g.cout, T::one(), &mut kernel_grad, g.cout);

        // dcols = dY · Kᵀ
        if let Some(dx) = input_grad.as_mut() {
            if g.is_pointwise() {
                let dst = &mut dx[x_range];
                gemm(false, true, rows, k, g.cout, T::one(), dy_chunk, g.cout, p.kernel.data(), g.cout, T::zero(), dst, k);
            } else {
                let dcols = &mut cols[..rows * k];
                gemm(false, true, rows, k, g.cout, T::one(), dy_chunk, g.cout, p.kernel.data(), g.cout, T::zero(), dcols, k);
                col2im(dcols, &g, n0, count, dx);
            }
        }
        n0 += count;
    }

    Ok(ConvGrads {
        kernel: Tensor::with_shape(p.kernel.shape().clone(), kernel_grad)?,
        bias: Tensor::from_vec(&[g.cout], bias_grad)?,
        input: input_grad.map(|d| Tensor::with_shape(x.shape().clone(), d)).transpose()?,
    })
}
