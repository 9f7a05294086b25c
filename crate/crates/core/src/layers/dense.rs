use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct DenseParams<T: Scalar> {
    /// `(n_in, n_out)`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Tensor<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<[usize; 3]> {
    let [n, f] = x.rows_cols()?;
    let [n_in, n_out] = p.weight.rows_cols()?;
    if f != n_in {
        return Err(shape_err!("dense layer expects {n_in} features, got {f}"));
    }
    if p.bias.dims() != [n_out] {
        return Err(shape_err!("dense bias {} does not match width {n_out}", p.bias.shape()));
    }
    Ok([n, n_in, n_out])
}

/// `x · W + b`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    let [n, n_in, n_out] = check(x, p)?;
    let mut out = vec![T::zero(); n * n_out];
    for row in out.chunks_mut(n_out) {
        row.copy_from_slice(p.bias.data());
    }
    gemm(false, false, n, n_out, n_in, T::one(), x.data(), n_in, p.weight.data(), n_out, T::one(), &mut out, n_out);
    Tensor::from_vec(&[n, n_out], out)
}

/// `dW = xᵀ·dy`, `db = Σ_rows dy`, `dx = dy·Wᵀ`.
pub fn dense_backward<T: Scalar>(x: &Tensor<T>, p: &DenseParams<T>, upstream: &Tensor<T>) -> Result<DenseGrads<T>> {
    let [n, n_in, n_out] = check(x, p)?;
    if upstream.dims() != [n, n_out] {
        return Err(shape_err!("upstream gradient {} does not match dense output ({n}, {n_out})", upstream.shape()));
    }
    let dy = upstream.data();
    let mut dw = Tensor::zeros(&[n_in, n_out]);
    gemm(true, false, n_in, n_out, n, T::one(), x.data(), n_in, dy, n_out, T::zero(), dw.data_mut(), n_out);
    let mut db = Tensor::zeros(&[n_out]);
    for row in dy.chunks(n_out) {
        for (b, &v) in db.data_mut().iter_mut().zip(row) {
            *b += v;
        }
    }
    let mut dx = Tensor::zeros(&[n, n_in]);
    gemm(false, true, n, n_in, n_out, T::one(), dy, n_out, p.weight.data(), n_out, T::zero(), dx.data_mut(), n_in);
    Ok(DenseGrads {
        weight: dw,
        bias: db,
        input: dx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_through() {
        let x = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let p = DenseParams { weight: w, bias: Tensor::zeros(&[3]) };
        assert_eq!(dense_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn hand_computed_affine() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let p = DenseParams {
            weight: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(),
        };
        assert_eq!(dense_forward(&x, &p).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        let p = DenseParams { weight: Tensor::zeros(&[2, 2]), bias: Tensor::zeros(&[2]) };
        assert!(dense_forward(&x, &p).is_err());
    }
}
