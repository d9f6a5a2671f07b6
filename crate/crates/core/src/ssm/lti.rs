//! Time-invariant mode: the SSM unrolled into a causal convolution kernel
//! `K = (C B_bar, C A_bar B_bar, C A_bar^2 B_bar, ...)` and `y = K * u`.

use super::zoh::zoh_coefficients;
use crate::error::{DmmError, Result};
use crate::numkernel::Tensor;

/// Single-input single-output diagonal SSM with constant parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem {
    /// Diagonal of the continuous state matrix.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

impl LtiSystem {
    fn state_dim(&self) -> Result<usize> {
        let n = self.a.len();
        if n == 0 || self.b.len() != n || self.c.len() != n {
            return Err(DmmError::shape(
                "lti_kernel",
                &[n, n, n],
                &[self.a.len(), self.b.len(), self.c.len()],
            ));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.delta > 0.0) {
            return Err(DmmError::invalid("lti_kernel", "delta must be positive"));
        }
        Ok(n)
    }
}

/// `K_j = sum_n C_n abar_n^j bbar_n` for `j < len`.
pub fn lti_kernel(sys: &LtiSystem, len: usize) -> Result<Tensor> {
    if len < 1 {
        return Err(DmmError::invalid("lti_kernel", "kernel length must be at least 1"));
    }
    let n = sys.state_dim()?;
    let mut kernel = vec![0.0; len];
    for s in 0..n {
        let (abar, factor) = zoh_coefficients(sys.delta, sys.a[s]);
        let mut carry = sys.c[s] * factor * sys.b[s];
        for k in kernel.iter_mut() {
            *k += carry;
            carry *= abar;
        }
    }
    let out = Tensor::new(&[len], kernel)?;
    Ok(out)
}

/// Causal convolution `y_t = sum_{j <= t} K_j u_{t - j}`; `u` may be shorter than `K`.
pub fn lti_apply(kernel: &Tensor, u: &Tensor) -> Result<Tensor> {
    let l = u.numel();
    if kernel.numel() < l {
        return Err(DmmError::invalid(
            "lti_apply",
            format!("kernel length {} shorter than input {l}", kernel.numel()),
        ));
    }
    let k = kernel.data();
    let x = u.data();
    let y = (0..l).map(|t| (0..=t).map(|j| k[j] * x[t - j]).sum()).collect();
    Ok(Tensor::from_parts(vec![l], y))
}
