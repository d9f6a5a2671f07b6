//! Zero-order-hold discretization of a diagonal state matrix.
//!
//! For one (channel, state) pair with continuous pole `a` and step `delta`:
//! `abar = exp(delta * a)` and `bbar = (exp(delta * a) - 1) / a * b`.
//! The input-side factor `(exp(delta * a) - 1) / a` is written here as
//! `delta * phi(z)` with `z = delta * a` and `phi(z) = expm1(z) / z`.

use crate::error::{DmmError, Result};
use crate::numkernel::kernels::exp_fast;
use crate::numkernel::Tensor;

/// Below this `|delta * a|` the input factor uses `delta * (1 + z / 2)`.
pub const SERIES_THRESHOLD: f64 = 1e-6;

// phi and phi' switch to a Taylor polynomial below this |z|, where
// (exp(z) - 1) / z would lose digits to cancellation.
const POLY_THRESHOLD: f64 = 0.1;

// 1 / (k + 1)! for k = 0..=10
const INV_FACT_SHIFTED: [f64; 11] = [
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
];

#[inline(always)]
fn phi_poly(z: f64) -> f64 {
    INV_FACT_SHIFTED.iter().rev().fold(0.0, |acc, c| acc * z + c)
}

#[inline(always)]
fn dphi_poly(z: f64) -> f64 {
    (1..INV_FACT_SHIFTED.len())
        .rev()
        .fold(0.0, |acc, k| acc * z + k as f64 * INV_FACT_SHIFTED[k])
}

/// Input factor `bbar / b` given an already computed `abar = exp(delta * a)`.
#[inline(always)]
pub(crate) fn input_factor(delta: f64, a: f64, abar: f64) -> f64 {
    let z = delta * a;
    let az = z.abs();
    // every branch is evaluated so the selection compiles to blends
    let series = delta * (1.0 + 0.5 * z);
    let poly = delta * phi_poly(z);
    let direct = (abar - 1.0) / a;
    select(az < SERIES_THRESHOLD, series, select(az < POLY_THRESHOLD, poly, direct))
}

/// [`input_factor`] together with its two partials.
#[inline(always)]
pub(crate) fn input_factor_with_partials(delta: f64, a: f64, abar: f64) -> (f64, f64, f64) {
    let z = delta * a;
    let az = z.abs();
    let tiny = az < SERIES_THRESHOLD;
    let small = az < POLY_THRESHOLD;
    let dd2 = delta * delta;
    let f = select(
        tiny,
        delta * (1.0 + 0.5 * z),
        select(small, delta * phi_poly(z), (abar - 1.0) / a),
    );
    // d/d(delta) [delta phi(z)] = phi + z phi' = exp(z)
    let d_delta = select(tiny, 1.0 + z, abar);
    let dphi = select(small, dphi_poly(z), (z * abar - (abar - 1.0)) / (z * z));
    let d_a = select(tiny, 0.5 * dd2, dd2 * dphi);
    (f, d_delta, d_a)
}

#[inline(always)]
fn select(c: bool, x: f64, y: f64) -> f64 {
    if c {
        x
    } else {
        y
    }
}

/// `(abar, bbar / b)` for one scalar pole.
pub fn zoh_coefficients(delta: f64, a: f64) -> (f64, f64) {
    let abar = exp_fast(delta * a);
    (abar, input_factor(delta, a, abar))
}

/// Discretizes `A: [d_inner, N]` (diagonal entries per channel) with per-step
/// `B_t: [L, N]` and `delta_t: [L, d_inner]`.
///
/// Returns `(A_bar, B_bar)`, both `[L, d_inner, N]`.
pub fn discretize_zoh(a: &Tensor, b_t: &Tensor, delta_t: &Tensor) -> Result<(Tensor, Tensor)> {
    let op = "discretize_zoh";
    if a.shape().len() != 2 || b_t.shape().len() != 2 || delta_t.shape().len() != 2 {
        return Err(DmmError::invalid(
            op,
            "expected A [d_inner, N], B [L, N], delta [L, d_inner]",
        ));
    }
    let (di, n) = (a.shape()[0], a.shape()[1]);
    let l = b_t.shape()[0];
    if b_t.shape()[1] != n {
        return Err(DmmError::shape(op, &[l, n], b_t.shape()));
    }
    if delta_t.shape() != [l, di] {
        return Err(DmmError::shape(op, &[l, di], delta_t.shape()));
    }
    a.check_finite(op)?;
    if delta_t.data().iter().any(|&d| d <= 0.0) {
        return Err(DmmError::invalid(op, "every delta must be positive and finite"));
    }
    let mut abar = vec![0.0; l * di * n];
    let mut bbar = vec![0.0; l * di * n];
    for t in 0..l {
        for c in 0..di {
            let dt = delta_t.data()[t * di + c];
            for s in 0..n {
                let (ab, factor) = zoh_coefficients(dt, a.data()[c * n + s]);
                let idx = (t * di + c) * n + s;
                abar[idx] = ab;
                bbar[idx] = factor * b_t.data()[t * n + s];
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![l, di, n], abar),
        Tensor::from_parts(vec![l, di, n], bbar),
    ))
}
