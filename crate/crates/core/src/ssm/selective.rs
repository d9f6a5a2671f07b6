//! Input-dependent (selective) SSM: `delta_t`, `B_t` and `C_t` are projections
//! of the current input, discretized per step and run through the scan.

use rand::Rng;

use super::scan::{linear_recurrence, readout, ScanMode};
use super::zoh::{input_factor, input_factor_with_partials};
use crate::error::{DmmError, Result};
use crate::numkernel::kernels::exp_fast;
use crate::numkernel::tape::Backward;
use crate::numkernel::{softplus_inverse, Tape, Tensor, Var};

/// Parameters of one selective SSM over `d_inner` channels with `N` states each.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveSSMParams {
    /// `[d_inner, N]`; the state matrix is `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[d_inner, d_inner]`, pre-softplus step projection.
    pub w_delta: Tensor,
    /// `[d_inner]`.
    pub delta_bias: Tensor,
    /// `[N, d_inner]`.
    pub w_b: Tensor,
    /// `[N, d_inner]`.
    pub w_c: Tensor,
    /// `[d_inner]` skip.
    pub d: Tensor,
}

impl SelectiveSSMParams {
    /// `-A` starts at `(1, 2, ..., N)` per channel, `softplus(delta_bias)` is
    /// uniform in `[0.001, 0.1]`, projections are uniform in `+-1/sqrt(d_inner)`
    /// and the skip starts at one.
    pub fn init(d_inner: usize, n_state: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_inner as f64).sqrt();
        let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        let w_delta = uniform(&[d_inner, d_inner]);
        let w_b = uniform(&[n_state, d_inner]);
        let w_c = uniform(&[n_state, d_inner]);
        let delta_bias = Tensor::from_fn(&[d_inner], |_| softplus_inverse(rng.gen_range(0.001..0.1)));
        Self {
            a_log: Tensor::from_fn(&[d_inner, n_state], |i| ((i % n_state + 1) as f64).ln()),
            w_delta,
            delta_bias,
            w_b,
            w_c,
            d: Tensor::full(&[d_inner], 1.0),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn n_state(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.a_log,
            &self.w_delta,
            &self.delta_bias,
            &self.w_b,
            &self.w_c,
            &self.d,
        ]
    }
}

/// Tape handles for the six [`SelectiveSSMParams`] tensors, in the same order.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveVars {
    pub a_log: Var,
    pub w_delta: Var,
    pub delta_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub d: Var,
}

impl SelectiveVars {
    pub fn bind(tape: &mut Tape, p: &SelectiveSSMParams) -> Self {
        Self {
            a_log: tape.param(&p.a_log),
            w_delta: tape.param(&p.w_delta),
            delta_bias: tape.param(&p.delta_bias),
            w_b: tape.param(&p.w_b),
            w_c: tape.param(&p.w_c),
            d: tape.param(&p.d),
        }
    }
}

/// Selective SSM on the tape. `u: [B, L, d_inner]` -> `[B, L, d_inner]`.
pub fn selective_ssm(tape: &mut Tape, u: Var, p: &SelectiveVars, mode: ScanMode) -> Result<Var> {
    let pre = tape.linear(u, p.w_delta, Some(p.delta_bias))?;
    let delta = tape.softplus(pre);
    let a_pos = tape.exp(p.a_log);
    let a = tape.neg(a_pos);
    let b = tape.linear(u, p.w_b, None)?;
    let c = tape.linear(u, p.w_c, None)?;
    selective_scan(tape, u, delta, a, b, c, p.d, mode)
}

/// Plain-tensor selective SSM for one sequence `u: [L, d_inner]`.
pub fn selective_forward(u: &Tensor, params: &SelectiveSSMParams) -> Result<Tensor> {
    selective_forward_with(u, params, ScanMode::default())
}

pub fn selective_forward_with(u: &Tensor, params: &SelectiveSSMParams, mode: ScanMode) -> Result<Tensor> {
    u.check_finite("selective_forward")?;
    if u.shape().len() != 2 || u.shape()[1] != params.d_inner() {
        return Err(DmmError::shape(
            "selective_forward",
            &[u.shape()[0], params.d_inner()],
            u.shape(),
        ));
    }
    let l = u.shape()[0];
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone().reshape(&[1, l, params.d_inner()])?);
    let vars = SelectiveVars {
        a_log: tape.constant(params.a_log.clone()),
        w_delta: tape.constant(params.w_delta.clone()),
        delta_bias: tape.constant(params.delta_bias.clone()),
        w_b: tape.constant(params.w_b.clone()),
        w_c: tape.constant(params.w_c.clone()),
        d: tape.constant(params.d.clone()),
    };
    let y = selective_ssm(&mut tape, uv, &vars, mode)?;
    tape.value(y).clone().reshape(&[l, params.d_inner()])
}

/// Fused discretize + scan + readout node.
///
/// `u, delta: [B, L, Di]`, `a: [Di, N]` (continuous poles), `b, c: [B, L, N]`,
/// `d: [Di]`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(
    tape: &mut Tape,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    mode: ScanMode,
) -> Result<Var> {
    let op = "selective_scan";
    let su = tape.shape(u).to_vec();
    if su.len() != 3 {
        return Err(DmmError::invalid(op, format!("u must be [B, L, d_inner], got {su:?}")));
    }
    let (bsz, l, di) = (su[0], su[1], su[2]);
    let sa = tape.shape(a);
    if sa.len() != 2 || sa[0] != di {
        return Err(DmmError::shape(op, &[di, 0], sa));
    }
    let n = sa[1];
    if tape.shape(delta) != su.as_slice() {
        return Err(DmmError::shape(op, &su, tape.shape(delta)));
    }
    for v in [b, c] {
        if tape.shape(v) != [bsz, l, n] {
            return Err(DmmError::shape(op, &[bsz, l, n], tape.shape(v)));
        }
    }
    if tape.shape(d) != [di] {
        return Err(DmmError::shape(op, &[di], tape.shape(d)));
    }

    let ins = ScanInputs::from_tensors(&[u, delta, a, b, c, d].map(|v| tape.value(v)));
    let dims = Dims { bsz, l, di, n };
    let mut states = vec![0.0; bsz * l * di * n];
    let mut y = vec![0.0; bsz * l * di];
    match mode {
        ScanMode::Sequential => fused_forward(&ins, dims, &mut states, &mut y),
        ScanMode::Parallel { .. } => scanned_forward(&ins, dims, mode, &mut states, &mut y),
    }
    let value = Tensor::from_parts(vec![bsz, l, di], y);
    value.check_finite(op)?;
    let rule = SelectiveScanRule { dims, mode, states };
    Ok(tape.push(value, vec![u, delta, a, b, c, d], rule))
}

#[derive(Clone, Copy)]
struct Dims {
    bsz: usize,
    l: usize,
    di: usize,
    n: usize,
}

struct ScanInputs<'a> {
    u: &'a [f64],
    delta: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    d: &'a [f64],
}

impl<'a> ScanInputs<'a> {
    fn from_tensors(t: &[&'a Tensor]) -> Self {
        Self {
            u: t[0].data(),
            delta: t[1].data(),
            a: t[2].data(),
            b: t[3].data(),
            c: t[4].data(),
            d: t[5].data(),
        }
    }
}

/// Defines `$name` to run `$body` through a copy compiled for the widest
/// vector unit the CPU reports. Rust never contracts `a * b + c`, so every
/// copy produces identical bits.
macro_rules! wide_fn {
    ($(#[$m:meta])* fn $name:ident($($arg:ident: $ty:ty),*) $(-> $ret:ty)? => $body:ident) => {
        $(#[$m])*
        fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,avx512f")]
                unsafe fn w512($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                #[target_feature(enable = "avx2")]
                unsafe fn w256($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                // SAFETY: each copy runs only after its features were detected.
                if std::is_x86_feature_detected!("avx512f") {
                    return unsafe { w512($($arg),*) };
                }
                if std::is_x86_feature_detected!("avx2") {
                    return unsafe { w256($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

wide_fn! {
    /// Discretization, recurrence and readout in one pass per step.
    fn fused_forward(p: &ScanInputs, dims: Dims, states: &mut [f64], y: &mut [f64]) => fused_forward_body
}

#[inline(always)]
fn fused_forward_body(p: &ScanInputs, dims: Dims, states: &mut [f64], y: &mut [f64]) {
    let Dims { bsz, l, di, n } = dims;
    let width = di * n;
    let zeros = vec![0.0; n];
    for bi in 0..bsz {
        let xs = &mut states[bi * l * width..(bi + 1) * l * width];
        for t in 0..l {
            let row = bi * l + t;
            let brow = &p.b[row * n..(row + 1) * n];
            let crow = &p.c[row * n..(row + 1) * n];
            let (done, rest) = xs.split_at_mut(t * width);
            for ch in 0..di {
                let dt = p.delta[row * di + ch];
                let uin = p.u[row * di + ch];
                let prev = if t > 0 {
                    &done[(t - 1) * width + ch * n..(t - 1) * width + (ch + 1) * n]
                } else {
                    &zeros
                };
                let cur = &mut rest[ch * n..(ch + 1) * n];
                advance_states(dt, uin, &p.a[ch * n..(ch + 1) * n], brow, prev, cur);
                let mut acc = 0.0;
                for (&cv, &x) in crow.iter().zip(cur.iter()) {
                    acc += cv * x;
                }
                y[row * di + ch] = acc + p.d[ch] * uin;
            }
        }
    }
}

/// `cur = abar * prev + bbar * u` for one channel's states.
#[inline(always)]
fn advance_states(dt: f64, uin: f64, poles: &[f64], brow: &[f64], prev: &[f64], cur: &mut [f64]) {
    let n = cur.len();
    let (poles, brow, prev) = (&poles[..n], &brow[..n], &prev[..n]);
    for s in 0..n {
        let pole = poles[s];
        let e = exp_fast(dt * pole);
        cur[s] = e * prev[s] + input_factor(dt, pole, e) * brow[s] * uin;
    }
}

wide_fn! {
    /// Per-sequence `(abar, bbar * u)` in `[L, Di, N]` layout.
    fn discretize_sequence(p: &ScanInputs, dims: Dims, bi: usize, abar: &mut [f64], drive: &mut [f64]) => discretize_sequence_body
}

#[inline(always)]
fn discretize_sequence_body(p: &ScanInputs, dims: Dims, bi: usize, abar: &mut [f64], drive: &mut [f64]) {
    let Dims { l, di, n, .. } = dims;
    for t in 0..l {
        let row = bi * l + t;
        let brow = &p.b[row * n..(row + 1) * n];
        for ch in 0..di {
            let dt = p.delta[row * di + ch];
            let uin = p.u[row * di + ch];
            let base = (t * di + ch) * n;
            let poles = &p.a[ch * n..(ch + 1) * n];
            let out_a = &mut abar[base..base + n];
            let out_b = &mut drive[base..base + n];
            for (((oa, ob), &pole), &bval) in out_a.iter_mut().zip(out_b.iter_mut()).zip(poles).zip(brow) {
                let e = exp_fast(dt * pole);
                *oa = e;
                *ob = input_factor(dt, pole, e) * bval * uin;
            }
        }
    }
}

fn scanned_forward(p: &ScanInputs, dims: Dims, mode: ScanMode, states: &mut [f64], y: &mut [f64]) {
    let Dims { bsz, l, di, n } = dims;
    let width = di * n;
    let per = l * width;
    let mut abar = vec![0.0; per];
    let mut drive = vec![0.0; per];
    for bi in 0..bsz {
        discretize_sequence(p, dims, bi, &mut abar, &mut drive);
        let xs = &mut states[bi * per..(bi + 1) * per];
        linear_recurrence(&abar, &drive, l, width, xs, mode);
        readout(
            xs,
            &p.c[bi * l * n..(bi + 1) * l * n],
            p.d,
            &p.u[bi * l * di..(bi + 1) * l * di],
            l,
            di,
            n,
            &mut y[bi * l * di..(bi + 1) * l * di],
        );
    }
}

struct SelectiveScanRule {
    dims: Dims,
    mode: ScanMode,
    states: Vec<f64>,
}

/// Gradient accumulators for one backward call.
struct ScanGrads {
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl ScanGrads {
    fn new(dims: Dims) -> Self {
        let Dims { bsz, l, di, n } = dims;
        Self {
            u: vec![0.0; bsz * l * di],
            delta: vec![0.0; bsz * l * di],
            a: vec![0.0; di * n],
            b: vec![0.0; bsz * l * n],
            c: vec![0.0; bsz * l * n],
            d: vec![0.0; di],
        }
    }

    fn into_vec(self) -> Vec<Option<Vec<f64>>> {
        vec![
            Some(self.u),
            Some(self.delta),
            Some(self.a),
            Some(self.b),
            Some(self.c),
            Some(self.d),
        ]
    }
}

/// Per-state scratch for one (step, channel) of the backward pass.
struct Lanes {
    g: Vec<f64>,
    abar: Vec<f64>,
    gu: Vec<f64>,
    gdt: Vec<f64>,
}

impl Lanes {
    fn new(n: usize) -> Self {
        Self {
            g: vec![0.0; n],
            abar: vec![0.0; n],
            gu: vec![0.0; n],
            gdt: vec![0.0; n],
        }
    }
}

/// Gradients of one channel at one step given the state adjoint in `lanes.g`.
/// Per-state contributions to the `u` and `delta` gradients are left in
/// `lanes.gu` / `lanes.gdt` for the caller to sum.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn channel_backward(
    dt: f64,
    uin: f64,
    gyv: f64,
    poles: &[f64],
    brow: &[f64],
    x_t: &[f64],
    x_prev: &[f64],
    lanes: &mut Lanes,
    gb: &mut [f64],
    gc: &mut [f64],
    ga: &mut [f64],
) {
    let n = lanes.g.len();
    let (poles, brow, x_t, x_prev) = (&poles[..n], &brow[..n], &x_t[..n], &x_prev[..n]);
    let (gb, gc, ga) = (&mut gb[..n], &mut gc[..n], &mut ga[..n]);
    let (g_in, abar, gu, gdt) = (
        &lanes.g[..n],
        &mut lanes.abar[..n],
        &mut lanes.gu[..n],
        &mut lanes.gdt[..n],
    );
    for s in 0..n {
        gc[s] += gyv * x_t[s];
        let pole = poles[s];
        let e = exp_fast(dt * pole);
        abar[s] = e;
        let g = g_in[s];
        let (factor, df_ddt, df_da) = input_factor_with_partials(dt, pole, e);
        let bval = brow[s];
        let g_abar = g * x_prev[s] * e;
        let g_factor = g * uin * bval;
        gu[s] = g * factor * bval;
        gb[s] += g * uin * factor;
        gdt[s] = g_abar * pole + g_factor * df_ddt;
        ga[s] += g_abar * dt + g_factor * df_da;
    }
}

impl SelectiveScanRule {
    // adjoint recurrence backwards in time: gx_t = gy_t C_t + abar_{t+1} gx_{t+1}

    fn scanned_backward(&self, p: &ScanInputs, gy: &[f64]) -> ScanGrads {
        let dims = self.dims;
        let Dims { bsz, l, di, n } = dims;
        let width = di * n;
        let per = l * width;
        let mut grads = ScanGrads::new(dims);
        let mut abar = vec![0.0; per];
        let mut drive = vec![0.0; per];
        let mut ra = vec![0.0; per];
        let mut rb = vec![0.0; per];
        let mut gx_rev = vec![0.0; per];
        for bi in 0..bsz {
            discretize_sequence(p, dims, bi, &mut abar, &mut drive);
            for t in 0..l {
                let r = l - 1 - t;
                let row = bi * l + t;
                let crow = &p.c[row * n..(row + 1) * n];
                let dst_a = &mut ra[r * width..(r + 1) * width];
                if t + 1 < l {
                    dst_a.copy_from_slice(&abar[(t + 1) * width..(t + 2) * width]);
                } else {
                    dst_a.fill(0.0);
                }
                for ch in 0..di {
                    let g = gy[row * di + ch];
                    let dst = &mut rb[(r * di + ch) * n..(r * di + ch + 1) * n];
                    for (o, &cval) in dst.iter_mut().zip(crow) {
                        *o = g * cval;
                    }
                }
            }
            linear_recurrence(&ra, &rb, l, width, &mut gx_rev, self.mode);
            scanned_accumulate(self, p, gy, bi, &gx_rev, &mut grads);
        }
        grads
    }
}

wide_fn! {
    fn fused_backward(rule: &SelectiveScanRule, p: &ScanInputs, gy: &[f64]) -> ScanGrads => fused_backward_body
}

#[inline(always)]
fn fused_backward_body(rule: &SelectiveScanRule, p: &ScanInputs, gy: &[f64]) -> ScanGrads {
    let dims = rule.dims;
    let Dims { bsz, l, di, n } = dims;
    let width = di * n;
    let mut grads = ScanGrads::new(dims);
    let zeros = vec![0.0; n];
    let mut lanes = Lanes::new(n);
    // abar_{t+1} gx_{t+1}, carried from the later step
    let mut carry = vec![0.0; width];
    for bi in 0..bsz {
        let xs = &rule.states[bi * l * width..(bi + 1) * l * width];
        carry.fill(0.0);
        for t in (0..l).rev() {
            let row = bi * l + t;
            let crow = &p.c[row * n..(row + 1) * n];
            let brow = &p.b[row * n..(row + 1) * n];
            for ch in 0..di {
                let gyv = gy[row * di + ch];
                let carry_ch = &mut carry[ch * n..(ch + 1) * n];
                for ((g, &cv), &k) in lanes.g.iter_mut().zip(crow).zip(carry_ch.iter()) {
                    *g = gyv * cv + k;
                }
                let base = (t * di + ch) * n;
                let x_prev = if t > 0 {
                    &xs[base - width..base - width + n]
                } else {
                    &zeros[..]
                };
                channel_backward(
                    p.delta[row * di + ch],
                    p.u[row * di + ch],
                    gyv,
                    &p.a[ch * n..(ch + 1) * n],
                    brow,
                    &xs[base..base + n],
                    x_prev,
                    &mut lanes,
                    &mut grads.b[row * n..(row + 1) * n],
                    &mut grads.c[row * n..(row + 1) * n],
                    &mut grads.a[ch * n..(ch + 1) * n],
                );
                for ((k, &e), &g) in carry_ch.iter_mut().zip(&lanes.abar).zip(&lanes.g) {
                    *k = e * g;
                }
                finish_channel(p, &mut grads, &lanes, row, ch, di, gyv);
            }
        }
    }
    grads
}

wide_fn! {
    fn scanned_accumulate(
        rule: &SelectiveScanRule,
        p: &ScanInputs,
        gy: &[f64],
        bi: usize,
        gx_rev: &[f64],
        grads: &mut ScanGrads
    ) => scanned_accumulate_body
}

#[inline(always)]
fn scanned_accumulate_body(
    rule: &SelectiveScanRule,
    p: &ScanInputs,
    gy: &[f64],
    bi: usize,
    gx_rev: &[f64],
    grads: &mut ScanGrads,
) {
    let Dims { l, di, n, .. } = rule.dims;
    let width = di * n;
    let xs = &rule.states[bi * l * width..(bi + 1) * l * width];
    let zeros = vec![0.0; n];
    let mut lanes = Lanes::new(n);
    for t in 0..l {
        let row = bi * l + t;
        let brow = &p.b[row * n..(row + 1) * n];
        let rev = &gx_rev[(l - 1 - t) * width..(l - t) * width];
        for ch in 0..di {
            let gyv = gy[row * di + ch];
            lanes.g.copy_from_slice(&rev[ch * n..(ch + 1) * n]);
            let base = (t * di + ch) * n;
            let x_prev = if t > 0 {
                &xs[base - width..base - width + n]
            } else {
                &zeros[..]
            };
            channel_backward(
                p.delta[row * di + ch],
                p.u[row * di + ch],
                gyv,
                &p.a[ch * n..(ch + 1) * n],
                brow,
                &xs[base..base + n],
                x_prev,
                &mut lanes,
                &mut grads.b[row * n..(row + 1) * n],
                &mut grads.c[row * n..(row + 1) * n],
                &mut grads.a[ch * n..(ch + 1) * n],
            );
            finish_channel(p, grads, &lanes, row, ch, di, gyv);
        }
    }
}

#[inline(always)]
fn finish_channel(p: &ScanInputs, grads: &mut ScanGrads, lanes: &Lanes, row: usize, ch: usize, di: usize, gyv: f64) {
    let uin = p.u[row * di + ch];
    grads.d[ch] += gyv * uin;
    let mut gu_acc = gyv * p.d[ch];
    for &v in &lanes.gu {
        gu_acc += v;
    }
    let mut gdt_acc = 0.0;
    for &v in &lanes.gdt {
        gdt_acc += v;
    }
    grads.u[row * di + ch] += gu_acc;
    grads.delta[row * di + ch] += gdt_acc;
}

impl Backward for SelectiveScanRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, gy: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let p = ScanInputs::from_tensors(inputs);
        let grads = match self.mode {
            ScanMode::Sequential => fused_backward(self, &p, gy),
            ScanMode::Parallel { .. } => self.scanned_backward(&p, gy),
        };
        grads.into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SelectiveSSMParams::init(4, 3, &mut rng);
        let y = selective_forward(&Tensor::zeros(&[6, 4]), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = SelectiveSSMParams::init(8, 16, &mut rng);
        for c in 0..8 {
            for s in 0..16 {
                let a = -p.a_log.data()[c * 16 + s].exp();
                assert!((a + (s + 1) as f64).abs() < 1e-12);
            }
        }
        for &b in p.delta_bias.data() {
            let dt = crate::numkernel::softplus(b);
            assert!((0.001 - 1e-12..=0.1 + 1e-12).contains(&dt));
        }
    }

    #[test]
    fn scan_op_gradients_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (bsz, l, di, n) = (2, 5, 3, 2);
        let u = random(&[bsz, l, di], -1.0, 1.0, &mut rng);
        let delta = random(&[bsz, l, di], 0.05, 0.6, &mut rng);
        let a = random(&[di, n], -2.0, -0.2, &mut rng);
        let b = random(&[bsz, l, n], -1.0, 1.0, &mut rng);
        let c = random(&[bsz, l, n], -1.0, 1.0, &mut rng);
        let d = random(&[di], -1.0, 1.0, &mut rng);
        let w = random(&[bsz, l, di], -1.0, 1.0, &mut rng);
        for mode in [
            ScanMode::Sequential,
            ScanMode::Parallel { lanes: 1 },
            ScanMode::Parallel { lanes: 2 },
        ] {
            let errs = check_gradients(
                |t, v| {
                    let y = selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5], mode)?;
                    let wv = t.constant(w.clone());
                    let p = t.mul(y, wv)?;
                    Ok(t.sum(p))
                },
                &[u.clone(), delta.clone(), a.clone(), b.clone(), c.clone(), d.clone()],
                1e-6,
            )
            .unwrap();
            assert!(errs.iter().all(|&e| e < 1e-7), "{mode}: {errs:?}");
        }
    }

    #[test]
    fn gradient_through_tiny_steps() {
        // exercise the series branch of the input factor
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (bsz, l, di, n) = (1, 4, 2, 2);
        let u = random(&[bsz, l, di], -1.0, 1.0, &mut rng);
        let delta = random(&[bsz, l, di], 1e-6, 1.5e-6, &mut rng);
        let a = random(&[di, n], -0.5, -0.1, &mut rng);
        let b = random(&[bsz, l, n], -1.0, 1.0, &mut rng);
        let c = random(&[bsz, l, n], -1.0, 1.0, &mut rng);
        let d = random(&[di], -1.0, 1.0, &mut rng);
        let errs = check_gradients(
            |t, v| {
                let y = selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5], ScanMode::default())?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &[u, delta, a, b, c, d],
            1e-7,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }
}
