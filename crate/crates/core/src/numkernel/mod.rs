//! Dense tensors, a reverse-mode tape, and a finite-difference gradient oracle.

mod gemm;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
mod tensor;

pub(crate) use gemm::{gemm, Layout};
pub use gradcheck::{check_gradient, check_gradients};
pub use kernels::{sigmoid, softplus, softplus_inverse, Activation};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{DmmError, Result};

/// Layer normalization over the last axis of `x`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(DmmError::shape("layer_norm", &[d], gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(DmmError::invalid("layer_norm", "eps must be positive"));
    }
    x.check_finite("layer_norm")?;
    let mut out = vec![0.0; x.numel()];
    kernels::layer_norm_rows(x.data(), d, gamma.data(), beta.data(), eps, &mut out);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Elementwise activation.
pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    x.check_finite("activation")?;
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}
