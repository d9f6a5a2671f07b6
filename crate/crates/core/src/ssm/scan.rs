//! First-order linear recurrences `x_t = a_t * x_{t-1} + b_t` evaluated either
//! step by step or as a work-efficient (up-sweep / down-sweep) prefix scan
//! over the associative combine of [`ScanElement`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{DmmError, Result};
use crate::numkernel::Tensor;

/// One step of the recurrence as an affine map `x -> a * x + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement {
    pub a: f64,
    pub b: f64,
}

impl ScanElement {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0 };

    /// Composition "first `self`, then `later`".
    #[inline]
    pub fn combine(self, later: Self) -> Self {
        Self {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    /// Tree scan; `lanes > 1` splits the independent channel-state lanes
    /// into that many chunks evaluated on the rayon pool.
    Parallel {
        lanes: usize,
    },
}

impl Default for ScanMode {
    fn default() -> Self {
        Self::Parallel { lanes: 1 }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sequential => f.write_str("sequential"),
            Self::Parallel { lanes: 1 } => f.write_str("parallel"),
            Self::Parallel { lanes } => write!(f, "parallel:{lanes}"),
        }
    }
}

impl FromStr for ScanMode {
    type Err = DmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel { lanes: 1 }),
            other => other
                .strip_prefix("parallel:")
                .and_then(|n| n.parse().ok())
                .filter(|&lanes| lanes >= 1)
                .map(|lanes| Self::Parallel { lanes })
                .ok_or_else(|| DmmError::invalid("scan mode", format!("unknown mode {other:?}"))),
        }
    }
}

/// Solves `out[t] = a[t] * out[t-1] + b[t]` with `out[-1] = 0` for `len` steps
/// of `width` independent lanes stored time-major (`a[t * width + lane]`).
pub(crate) fn linear_recurrence(a: &[f64], b: &[f64], len: usize, width: usize, out: &mut [f64], mode: ScanMode) {
    debug_assert!(a.len() >= len * width && b.len() >= len * width && out.len() >= len * width);
    match mode {
        ScanMode::Sequential => sequential(a, b, len, width, out),
        ScanMode::Parallel { lanes } if lanes <= 1 || width < 2 => tree_scan(a, b, len, width, 0..width, out, width),
        ScanMode::Parallel { lanes } => {
            let chunk = width.div_ceil(lanes);
            let pieces: Vec<(usize, Vec<f64>)> = (0..width)
                .step_by(chunk)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| {
                    let end = (start + chunk).min(width);
                    let w = end - start;
                    let mut local = vec![0.0; len * w];
                    tree_scan(a, b, len, width, start..end, &mut local, w);
                    (start, local)
                })
                .collect();
            for (start, local) in pieces {
                let w = local.len() / len.max(1);
                for t in 0..len {
                    out[t * width + start..t * width + start + w].copy_from_slice(&local[t * w..(t + 1) * w]);
                }
            }
        }
    }
}

fn sequential(a: &[f64], b: &[f64], len: usize, width: usize, out: &mut [f64]) {
    if len == 0 {
        return;
    }
    for s in 0..width {
        out[s] = a[s] * 0.0 + b[s];
    }
    for t in 1..len {
        let (prev, cur) = out.split_at_mut(t * width);
        let prev = &prev[(t - 1) * width..];
        let row = t * width;
        for s in 0..width {
            cur[s] = a[row + s] * prev[s] + b[row + s];
        }
    }
}

/// Blelloch scan over the lanes in `lanes`, writing `len * lanes.len()` values
/// into `out` with row stride `out_width`.
fn tree_scan(
    a: &[f64],
    b: &[f64],
    len: usize,
    width: usize,
    lanes: std::ops::Range<usize>,
    out: &mut [f64],
    out_width: usize,
) {
    if len == 0 {
        return;
    }
    let w = lanes.len();
    let size = len.next_power_of_two();
    let mut ea = vec![1.0; size * w];
    let mut eb = vec![0.0; size * w];
    for t in 0..len {
        ea[t * w..(t + 1) * w].copy_from_slice(&a[t * width + lanes.start..t * width + lanes.end]);
        eb[t * w..(t + 1) * w].copy_from_slice(&b[t * width + lanes.start..t * width + lanes.end]);
    }

    // up-sweep: node i absorbs its left sibling j
    let mut half = 1;
    while half < size {
        let stride = 2 * half;
        let mut i = stride - 1;
        while i < size {
            let j = i - half;
            combine_rows(&mut ea, &mut eb, j, i, w);
            i += stride;
        }
        half = stride;
    }

    // down-sweep: replace the root by the identity and push exclusive prefixes down
    ea[(size - 1) * w..size * w].iter_mut().for_each(|v| *v = 1.0);
    eb[(size - 1) * w..size * w].iter_mut().for_each(|v| *v = 0.0);
    let mut half = size / 2;
    while half >= 1 {
        let stride = 2 * half;
        let mut i = stride - 1;
        while i < size {
            let j = i - half;
            // prefix P sits at i, left-range total at j:
            // j <- P, i <- P then left-range
            for s in 0..w {
                let (pa, pb) = (ea[i * w + s], eb[i * w + s]);
                let (la, lb) = (ea[j * w + s], eb[j * w + s]);
                ea[j * w + s] = pa;
                eb[j * w + s] = pb;
                ea[i * w + s] = la * pa;
                eb[i * w + s] = la * pb + lb;
            }
            i += stride;
        }
        half /= 2;
    }

    // inclusive value: exclusive prefix followed by the element itself
    for t in 0..len {
        for s in 0..w {
            let src = t * width + lanes.start + s;
            out[t * out_width + s] = a[src] * eb[t * w + s] + b[src];
        }
    }
}

/// `row[i] <- combine(row[j], row[i])`.
#[inline]
fn combine_rows(ea: &mut [f64], eb: &mut [f64], j: usize, i: usize, w: usize) {
    let (lo_a, hi_a) = ea.split_at_mut(i * w);
    let (lo_b, hi_b) = eb.split_at_mut(i * w);
    let (ja, jb) = (&lo_a[j * w..(j + 1) * w], &lo_b[j * w..(j + 1) * w]);
    for s in 0..w {
        let later_a = hi_a[s];
        hi_b[s] += later_a * jb[s];
        hi_a[s] = later_a * ja[s];
    }
}

struct ScanShapes {
    l: usize,
    di: usize,
    n: usize,
}

fn check_scan_inputs(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, d: &Tensor, u: &Tensor) -> Result<ScanShapes> {
    let op = "scan";
    if a_bar.shape().len() != 3 {
        return Err(DmmError::invalid(op, "A_bar must be [L, d_inner, N]"));
    }
    let (l, di, n) = (a_bar.shape()[0], a_bar.shape()[1], a_bar.shape()[2]);
    if b_bar.shape() != a_bar.shape() {
        return Err(DmmError::shape(op, a_bar.shape(), b_bar.shape()));
    }
    if c.shape() != [l, n] {
        return Err(DmmError::shape(op, &[l, n], c.shape()));
    }
    if d.shape() != [di] {
        return Err(DmmError::shape(op, &[di], d.shape()));
    }
    if u.shape() != [l, di] {
        return Err(DmmError::shape(op, &[l, di], u.shape()));
    }
    Ok(ScanShapes { l, di, n })
}

/// Runs the discretized SSM: `x_t = A_bar_t * x_{t-1} + B_bar_t * u_t`,
/// `y_t = sum_n C_t[n] x_t[.., n] + D * u_t`, with `x_{-1} = 0`.
pub fn scan_with(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, d: &Tensor, u: &Tensor, mode: ScanMode) -> Result<Tensor> {
    let ScanShapes { l, di, n } = check_scan_inputs(a_bar, b_bar, c, d, u)?;
    let width = di * n;
    let mut drive = vec![0.0; l * width];
    for t in 0..l {
        for ch in 0..di {
            let uv = u.data()[t * di + ch];
            for s in 0..n {
                let idx = (t * di + ch) * n + s;
                drive[idx] = b_bar.data()[idx] * uv;
            }
        }
    }
    let mut x = vec![0.0; l * width];
    linear_recurrence(a_bar.data(), &drive, l, width, &mut x, mode);
    let mut y = vec![0.0; l * di];
    readout(&x, c.data(), d.data(), u.data(), l, di, n, &mut y);
    let out = Tensor::from_parts(vec![l, di], y);
    out.check_finite("scan")?;
    Ok(out)
}

/// `y[t, c] = sum_n C[t, n] * x[t, c, n] + D[c] * u[t, c]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn readout(x: &[f64], c: &[f64], d: &[f64], u: &[f64], l: usize, di: usize, n: usize, y: &mut [f64]) {
    for t in 0..l {
        let ct = &c[t * n..(t + 1) * n];
        for ch in 0..di {
            let xs = &x[(t * di + ch) * n..(t * di + ch + 1) * n];
            let acc: f64 = xs.iter().zip(ct).map(|(xv, cv)| xv * cv).sum();
            y[t * di + ch] = acc + d[ch] * u[t * di + ch];
        }
    }
}

pub fn scan_sequential(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, d: &Tensor, u: &Tensor) -> Result<Tensor> {
    scan_with(a_bar, b_bar, c, d, u, ScanMode::Sequential)
}

pub fn scan_parallel(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, d: &Tensor, u: &Tensor) -> Result<Tensor> {
    scan_with(a_bar, b_bar, c, d, u, ScanMode::Parallel { lanes: 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recurrence(mode: ScanMode, a: &[f64], b: &[f64], len: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; len * width];
        linear_recurrence(a, b, len, width, &mut out, mode);
        out
    }

    #[test]
    fn running_count() {
        let len = 13;
        let ones = vec![1.0; len];
        let out = recurrence(ScanMode::Parallel { lanes: 1 }, &ones, &ones, len, 1);
        let want: Vec<f64> = (1..=len).map(|t| t as f64).collect();
        assert_eq!(out, want);
    }

    #[test]
    fn tree_matches_sequential_across_lengths_and_lanes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in [1, 2, 3, 4, 5, 7, 8, 9, 31, 64, 100] {
            let width = 5;
            let a: Vec<f64> = (0..len * width).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..len * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seq = recurrence(ScanMode::Sequential, &a, &b, len, width);
            for lanes in [1, 2, 3, 8] {
                let par = recurrence(ScanMode::Parallel { lanes }, &a, &b, len, width);
                for (x, y) in seq.iter().zip(&par) {
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "len {len} lanes {lanes}");
                }
            }
        }
    }

    #[test]
    fn single_step_is_bit_identical() {
        let a = [0.3, 0.7];
        let b = [1.5, -2.0];
        assert_eq!(
            recurrence(ScanMode::Sequential, &a, &b, 1, 2),
            recurrence(ScanMode::Parallel { lanes: 1 }, &a, &b, 1, 2)
        );
    }

    #[test]
    fn scan_mode_round_trips_text() {
        for mode in [
            ScanMode::Sequential,
            ScanMode::Parallel { lanes: 1 },
            ScanMode::Parallel { lanes: 4 },
        ] {
            assert_eq!(mode.to_string().parse::<ScanMode>().unwrap(), mode);
        }
        assert!("parallel:0".parse::<ScanMode>().is_err());
        assert!("fast".parse::<ScanMode>().is_err());
    }

    #[test]
    fn scan_rejects_bad_shapes() {
        let ab = Tensor::zeros(&[3, 2, 4]);
        let c = Tensor::zeros(&[3, 4]);
        let d = Tensor::zeros(&[2]);
        let u = Tensor::zeros(&[3, 2]);
        assert!(scan_sequential(&ab, &ab, &c, &d, &u).is_ok());
        assert!(scan_sequential(&ab, &ab, &Tensor::zeros(&[3, 3]), &d, &u).is_err());
        assert!(scan_sequential(&ab, &ab, &c, &Tensor::zeros(&[3]), &u).is_err());
        assert!(scan_parallel(&ab, &ab, &c, &d, &Tensor::zeros(&[2, 2])).is_err());
    }

    fn element() -> impl Strategy<Value = ScanElement> {
        (-2.0f64..2.0, -2.0f64..2.0).prop_map(|(a, b)| ScanElement { a, b })
    }

    proptest! {
        #[test]
        fn combine_is_associative(e1 in element(), e2 in element(), e3 in element()) {
            let left = e1.combine(e2).combine(e3);
            let right = e1.combine(e2.combine(e3));
            prop_assert!((left.a - right.a).abs() < 1e-12);
            prop_assert!((left.b - right.b).abs() < 1e-12);
        }

        #[test]
        fn identity_is_neutral(e in element()) {
            prop_assert_eq!(ScanElement::IDENTITY.combine(e), e);
            prop_assert_eq!(e.combine(ScanElement::IDENTITY), e);
        }
    }
}
