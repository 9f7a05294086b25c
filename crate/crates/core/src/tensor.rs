//! Dense row-major tensors.
//!
//! Images and activations use the channels-last `(N, H, W, C)` layout, dense
//! kernels are `(n_in, n_out)` and convolution kernels `(kh, kw, C_in, C_out)`.
//! Tensors are generic over the element type: `f32` is the standard training
//! precision and `f64` the wide precision used for finite-difference checks.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// 32-bit floats.
    Standard,
    /// 64-bit floats.
    Wide,
}

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Standard;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Wide;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major GEMM on slices: `C = alpha * op(A) * op(B) + beta * C`.
///
/// `op(A)` is `m×k`; when `transpose_a` is set, `a` holds the `k×m` matrix
/// with row stride `lda`. Likewise for `b`. `c` is `m×n` with row stride
/// `ldc`. When `beta` is zero the prior contents of `c` are ignored.
///
/// Panics if any slice is too short for the described matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    transpose_a: bool,
    transpose_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for row in c.chunks_mut(ldc).take(m) {
            for v in &mut row[..n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    let (a_rows, a_cols) = if transpose_a { (k, m) } else { (m, k) };
    let (b_rows, b_cols) = if transpose_b { (n, k) } else { (k, n) };
    assert!(lda >= a_cols && a.len() >= (a_rows - 1) * lda + a_cols, "gemm: A too short");
    assert!(ldb >= b_cols && b.len() >= (b_rows - 1) * ldb + b_cols, "gemm: B too short");
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "gemm: C too short");
    let (rsa, csa) = if transpose_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if transpose_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    // SAFETY: bounds asserted above; `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Ordered tensor extents. Every extent is at least 1; the empty shape is a
/// scalar with one element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(shape_err!("extent of axis {axis} is zero in {dims:?}"));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| shape_err!("element count of {dims:?} overflows"))?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides (last axis fastest).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    pub fn offset(&self, coord: &[usize]) -> Result<usize> {
        if coord.len() != self.rank() {
            return Err(shape_err!("coordinate {coord:?} has wrong rank for {:?}", self.0));
        }
        let mut offset = 0;
        for ((&c, &d), s) in coord.iter().zip(&self.0).zip(self.strides()) {
            if c >= d {
                return Err(shape_err!("coordinate {coord:?} out of bounds for {:?}", self.0));
            }
            offset += c * s;
        }
        Ok(offset)
    }

    pub fn coord(&self, mut offset: usize) -> Vec<usize> {
        let mut coord = vec![0; self.rank()];
        for (i, s) in self.strides().into_iter().enumerate() {
            coord[i] = offset / s;
            offset %= s;
        }
        coord
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{} {:?}", self.shape, &self.data[..self.data.len().min(PREVIEW)])?;
        if self.data.len() > PREVIEW {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::with_shape(shape, data)
    }

    pub fn with_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "{} values supplied for shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    /// Zero tensor. Panics on a zero extent; use [`Tensor::full`] for
    /// untrusted shapes.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero()).expect("zeros: invalid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    /// He-normal initialisation: i.i.d. `N(0, 2 / fan_in)`.
    pub fn he_normal<R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Result<Self> {
        if fan_in == 0 {
            return Err(shape_err!("fan_in must be at least 1"));
        }
        let shape = Shape::new(dims)?;
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::of(z * std)
            })
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, coord: &[usize]) -> Result<T> {
        Ok(self.data[self.shape.offset(coord)?])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise binary operation. Shapes must match, except that a
    /// single-element tensor broadcasts against any shape.
    pub fn map2(&self, other: &Tensor<T>, op: BinaryOp) -> Result<Self> {
        let f = |a: T, b: T| match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        };
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if other.numel() == 1 {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.numel() == 1 {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        Err(shape_err!("elementwise operands {} and {} differ", self.shape, other.shape))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.map2(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.map2(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.map2(other, BinaryOp::Mul)
    }

    /// In-place `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("cannot accumulate {} into {}", other.shape, self.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += alpha * other` for identical shapes.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("cannot accumulate {} into {}", other.shape, self.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Reduces over `axes`, removing them from the shape. Reducing every axis
    /// yields a scalar tensor.
    pub fn reduce(&self, axes: &[usize], op: ReduceOp) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(shape_err!("axis {axis} invalid for rank {rank}"));
            }
            if reduced[axis] {
                return Err(shape_err!("axis {axis} listed twice"));
            }
            reduced[axis] = true;
        }
        let dims = self.dims();
        let out_dims: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| dims[i]).collect();
        let out_shape = Shape(out_dims);
        let out_strides = out_shape.strides();
        // Stride in the output for each input axis (0 for reduced axes).
        let mut map_strides = vec![0; rank];
        let mut j = 0;
        for i in 0..rank {
            if !reduced[i] {
                map_strides[i] = out_strides[j];
                j += 1;
            }
        }
        let init = match op {
            ReduceOp::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut out = vec![init; out_shape.numel()];
        let mut coord = vec![0usize; rank];
        for &v in &self.data {
            let o: usize = coord.iter().zip(&map_strides).map(|(c, s)| c * s).sum();
            match op {
                ReduceOp::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
                _ => out[o] += v,
            }
            for axis in (0..rank).rev() {
                coord[axis] += 1;
                if coord[axis] < dims[axis] {
                    break;
                }
                coord[axis] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let count = T::of((self.numel() / out_shape.numel()) as f64);
            for v in &mut out {
                *v /= count;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(shape_err!("matmul needs rank-2 operands, got {} and {}", self.shape, other.shape));
        }
        let (m, k) = (self.dims()[0], self.dims()[1]);
        let (k2, n) = (other.dims()[0], other.dims()[1]);
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions differ: {} vs {}", self.shape, other.shape));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(false, false, m, n, k, T::one(), &self.data, k, &other.data, n, T::zero(), &mut out.data, n);
        Ok(out)
    }

    /// Pads the spatial axes of an `(N, H, W, C)` tensor with `value`.
    pub fn pad_spatial(&self, top: usize, bottom: usize, left: usize, right: usize, value: T) -> Result<Self> {
        let [n, h, w, c] = self.nhwc()?;
        let (ph, pw) = (h + top + bottom, w + left + right);
        let mut out = vec![value; n * ph * pw * c];
        for b in 0..n {
            for y in 0..h {
                let src = ((b * h + y) * w) * c;
                let dst = ((b * ph + y + top) * pw + left) * c;
                out[dst..dst + w * c].copy_from_slice(&self.data[src..src + w * c]);
            }
        }
        Ok(Tensor {
            shape: Shape(vec![n, ph, pw, c]),
            data: out,
        })
    }

    /// Extents of a rank-4 tensor.
    pub fn nhwc(&self) -> Result<[usize; 4]> {
        match *self.dims() {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(shape_err!("expected an (N, H, W, C) tensor, got {}", self.shape)),
        }
    }

    /// Extents of a rank-2 tensor.
    pub fn rows_cols(&self) -> Result<[usize; 2]> {
        match *self.dims() {
            [r, c] => Ok([r, c]),
            _ => Err(shape_err!("expected a rank-2 tensor, got {}", self.shape)),
        }
    }

    /// Index of the maximum of each row of a rank-2 tensor (first wins ties).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let [_, cols] = self.rows_cols()?;
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect())
    }
}
