//! Scalar and row-wise kernels shared by the plain-tensor API and the tape.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DmmError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Silu => x * sigmoid(x),
            // exact form: x * Phi(x)
            Self::Gelu => 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
            Self::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Self::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                cdf + x * pdf
            }
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Silu => "silu",
            Self::Gelu => "gelu",
            Self::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = DmmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "silu" => Ok(Self::Silu),
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            other => Err(DmmError::invalid("activation", format!("unknown kind {other:?}"))),
        }
    }
}

/// `exp(x)` to within a few ulps, flushing to zero below `-746` and saturating
/// above `709.78`.
///
/// Branch-free so that loops calling it vectorize.
#[inline(always)]
pub(crate) fn exp_fast(x: f64) -> f64 {
    #[allow(clippy::excessive_precision)]
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    #[allow(clippy::excessive_precision)]
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    const C: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let x = x.clamp(-746.0, 709.78);
    let shifted = x * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = C[13];
    for &c in C[..13].iter().rev() {
        p = p * r + c;
    }
    let n = shifted.to_bits().wrapping_sub(SHIFT.to_bits()) as i64;
    // two factors keep each exponent normal while the product reaches subnormals
    let n1 = n >> 1;
    let pow2 = |e: i64| f64::from_bits(((e + 1023) as u64) << 52);
    p * pow2(n1) * pow2(n - n1)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = exp_fast(-x.abs());
    let r = 1.0 / (1.0 + e);
    if x >= 0.0 {
        r
    } else {
        e * r
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + exp_fast(-x.abs()).ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // log(exp(y) - 1), written to stay accurate for small and large y
    y + (-(-y).exp_m1()).ln()
}

/// Per-row normalization statistics produced by [`layer_norm_rows`].
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_rows(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> NormCache {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    NormCache { xhat, rstd }
}

pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    d: usize,
    gamma: &[f64],
    gout: &[f64],
    gx: &mut [f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    let rows = cache.rstd.len();
    let mut gh = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &gout[r * d..(r + 1) * d];
        let mut mean_gh = 0.0;
        let mut mean_ghx = 0.0;
        for j in 0..d {
            ggamma[j] += g[j] * xh[j];
            gbeta[j] += g[j];
            gh[j] = g[j] * gamma[j];
            mean_gh += gh[j];
            mean_ghx += gh[j] * xh[j];
        }
        mean_gh /= d as f64;
        mean_ghx /= d as f64;
        let inv = cache.rstd[r];
        for j in 0..d {
            gx[r * d + j] += inv * (gh[j] - mean_gh - xh[j] * mean_ghx);
        }
    }
}
