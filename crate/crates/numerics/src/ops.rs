//! Graph-free versions of the common ops, for inference paths and oracles.

use crate::error::{NumericsError, Result};
use crate::graph::LAYER_NORM_EPS;
use crate::kernels::{self, BinaryOp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::kernels::{concat, matmul, silu, softmax_rows};

pub fn elementwise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::binary(a, b, BinaryOp::Mul)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::binary(a, b, BinaryOp::Add)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::binary(a, b, BinaryOp::Sub)
}

/// Normalizes over the last axis, then applies `gain` and `bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().unwrap_or(&0);
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(NumericsError::dim(
            "layer_norm",
            format!(
                "gain {:?} / bias {:?} do not match last axis {n}",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let (y, _) = kernels::layer_norm_rows(x, LAYER_NORM_EPS)?;
    add(&elementwise_mul(&y, gain)?, bias)
}

pub fn mean_pool<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    kernels::mean_axis(x, axis)
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(NumericsError::dim("transpose", "needs at least two axes"));
    }
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.swap(nd - 2, nd - 1);
    kernels::permute(x, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_pool_of_constant() {
        let x = Tensor::<f64>::full(&[3, 5, 2], 1.25);
        let m = mean_pool(&x, 1).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert!(m.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let x = Tensor::<f64>::from_fn(&[2, 6], |i| (i * i) as f64 * 0.3);
        let y = layer_norm(&x, &Tensor::ones(&[6]), &Tensor::zeros(&[6])).unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let mean = row.sum() / 6.0;
            let var = row.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_checks_affine_shape() {
        let x = Tensor::<f32>::zeros(&[2, 4]);
        assert!(layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[4])).is_err());
    }
}
