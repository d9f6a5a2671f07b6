//! Multi-modal token mixers over the interleaved (rtg, state, action) stream.
//!
//! Position `p` of the stream belongs to modality `p % 3`. Each modality owns
//! its own kernel (or weight matrix) and bias, and every output position only
//! sees the `window` tokens ending at itself, with zeros in front of the
//! sequence start.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{DmmError, Result};
use crate::numkernel::tape::Backward;
use crate::numkernel::{gemm, layer_norm, Layout, Tape, Tensor, Var};

pub const MODALITIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MixerKind {
    /// Depthwise convolution with one kernel per modality.
    #[default]
    MmConv,
    /// Window flattened to `window * d` and mapped back to `d` per modality.
    MmLinear,
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MmConv => "mm_conv",
            Self::MmLinear => "mm_linear",
        })
    }
}

impl FromStr for MixerKind {
    type Err = DmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mm_conv" => Ok(Self::MmConv),
            "mm_linear" => Ok(Self::MmLinear),
            other => Err(DmmError::invalid("MixerKind", format!("unknown mixer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixerConfig {
    pub kind: MixerKind,
    /// Number of tokens seen by each output position, including itself.
    pub window: usize,
    pub d: usize,
}

impl MixerConfig {
    pub fn new(kind: MixerKind, window: usize, d: usize) -> Result<Self> {
        let cfg = Self { kind, window, d };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(DmmError::invalid("MixerConfig", "window must be at least 1"));
        }
        if self.d < 1 {
            return Err(DmmError::invalid("MixerConfig", "d must be at least 1"));
        }
        Ok(())
    }

    /// Time steps touched by one window.
    pub fn span_steps(&self) -> usize {
        self.window.div_ceil(MODALITIES)
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        match self.kind {
            MixerKind::MmConv => vec![MODALITIES, self.window, self.d],
            MixerKind::MmLinear => vec![MODALITIES, self.d, self.window * self.d],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        vec![MODALITIES, self.d]
    }

    /// Learnable scalars in one mixer: `3(w d + d)` for conv, `3(w d d + d)` for linear.
    pub fn parameter_count(&self) -> usize {
        let (w, d) = (self.window, self.d);
        match self.kind {
            MixerKind::MmConv => MODALITIES * (w * d + d),
            MixerKind::MmLinear => MODALITIES * (w * d * d + d),
        }
    }
}

/// Per-modality mixer weights, slots ordered (rtg, state, action).
///
/// Conv kernels are `[3, window, d]`, tap `window - 1` touching the current
/// token. Linear weights are `[3, d, window * d]` in `(out, in)` layout, the
/// input being the window flattened oldest token first.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl MixerWeights {
    pub fn init(cfg: &MixerConfig, rng: &mut impl Rng) -> Self {
        let fan_in = match cfg.kind {
            MixerKind::MmConv => cfg.window,
            MixerKind::MmLinear => cfg.window * cfg.d,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let kernel = Tensor::from_fn(&cfg.kernel_shape(), |_| rng.gen_range(-bound..bound));
        let bias = Tensor::from_fn(&cfg.bias_shape(), |_| rng.gen_range(-bound..bound));
        Self { kernel, bias }
    }

    pub fn zeros(cfg: &MixerConfig) -> Self {
        Self {
            kernel: Tensor::zeros(&cfg.kernel_shape()),
            bias: Tensor::zeros(&cfg.bias_shape()),
        }
    }

    /// Weights under which every modality passes its current token through unchanged.
    pub fn identity(cfg: &MixerConfig) -> Self {
        let mut w = Self::zeros(cfg);
        let (win, d) = (cfg.window, cfg.d);
        let k = w.kernel.data_mut();
        for m in 0..MODALITIES {
            match cfg.kind {
                MixerKind::MmConv => {
                    let base = (m * win + win - 1) * d;
                    k[base..base + d].fill(1.0);
                }
                MixerKind::MmLinear => {
                    for c in 0..d {
                        k[(m * d + c) * win * d + (win - 1) * d + c] = 1.0;
                    }
                }
            }
        }
        w
    }

    fn check(&self, cfg: &MixerConfig, op: &'static str) -> Result<()> {
        cfg.validate()?;
        if self.kernel.shape() != cfg.kernel_shape().as_slice() {
            return Err(DmmError::shape(op, &cfg.kernel_shape(), self.kernel.shape()));
        }
        if self.bias.shape() != cfg.bias_shape().as_slice() {
            return Err(DmmError::shape(op, &cfg.bias_shape(), self.bias.shape()));
        }
        Ok(())
    }
}

/// Prepends `window - 1` zero rows to a `[T, d]` sequence (or each sequence of a `[B, T, d]` batch).
pub fn causal_pad(seq: &Tensor, window: usize) -> Result<Tensor> {
    if window < 1 {
        return Err(DmmError::invalid("causal_pad", "window must be at least 1"));
    }
    let (bsz, t, d) = batch_dims(seq.shape(), "causal_pad")?;
    let tp = t + window - 1;
    let mut out = vec![0.0; bsz * tp * d];
    for b in 0..bsz {
        let dst = (b * tp + window - 1) * d;
        out[dst..dst + t * d].copy_from_slice(&seq.data()[b * t * d..(b + 1) * t * d]);
    }
    let mut shape = seq.shape().to_vec();
    let axis = shape.len() - 2;
    shape[axis] = tp;
    Ok(Tensor::from_parts(shape, out))
}

/// Per-modality depthwise causal convolution.
pub fn mm_conv1d(seq: &Tensor, weights: &MixerWeights, cfg: &MixerConfig) -> Result<Tensor> {
    apply(seq, weights, cfg, MixerKind::MmConv, "mm_conv1d")
}

/// Per-modality linear map of the flattened causal window.
pub fn mm_linear(seq: &Tensor, weights: &MixerWeights, cfg: &MixerConfig) -> Result<Tensor> {
    apply(seq, weights, cfg, MixerKind::MmLinear, "mm_linear")
}

/// Runs whichever mixer `cfg.kind` selects.
pub fn mix(seq: &Tensor, weights: &MixerWeights, cfg: &MixerConfig) -> Result<Tensor> {
    apply(seq, weights, cfg, cfg.kind, "mix")
}

fn apply(seq: &Tensor, weights: &MixerWeights, cfg: &MixerConfig, kind: MixerKind, op: &'static str) -> Result<Tensor> {
    if cfg.kind != kind {
        return Err(DmmError::invalid(op, format!("config selects {}", cfg.kind)));
    }
    weights.check(cfg, op)?;
    let (bsz, t, d) = batch_dims(seq.shape(), op)?;
    if d != cfg.d {
        return Err(DmmError::shape(op, &[t, cfg.d], &[t, d]));
    }
    seq.check_finite(op)?;
    let geom = Geometry {
        bsz,
        t,
        d,
        w: cfg.window,
    };
    let out = match kind {
        MixerKind::MmConv => geom.conv_forward(seq.data(), weights.kernel.data(), weights.bias.data()),
        MixerKind::MmLinear => geom.linear_forward(seq.data(), weights.kernel.data(), weights.bias.data()),
    };
    Ok(Tensor::from_parts(seq.shape().to_vec(), out))
}

/// `h + MMTM(LN(h))`.
pub fn mixer_residual(
    h: &Tensor,
    weights: &MixerWeights,
    cfg: &MixerConfig,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let normed = layer_norm(h, gamma, beta, eps)?;
    let mixed = mix(&normed, weights, cfg)?;
    let data = h.data().iter().zip(mixed.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::from_parts(h.shape().to_vec(), data))
}

/// Differentiable mixer over a `[B, T, d]` (or `[T, d]`) variable.
pub fn mixer_op(tape: &mut Tape, x: Var, kernel: Var, bias: Var, cfg: &MixerConfig) -> Result<Var> {
    let op = "mixer_op";
    cfg.validate()?;
    if tape.shape(kernel) != cfg.kernel_shape().as_slice() {
        return Err(DmmError::shape(op, &cfg.kernel_shape(), tape.shape(kernel)));
    }
    if tape.shape(bias) != cfg.bias_shape().as_slice() {
        return Err(DmmError::shape(op, &cfg.bias_shape(), tape.shape(bias)));
    }
    let (bsz, t, d) = batch_dims(tape.shape(x), op)?;
    if d != cfg.d {
        return Err(DmmError::shape(op, &[t, cfg.d], &[t, d]));
    }
    let geom = Geometry {
        bsz,
        t,
        d,
        w: cfg.window,
    };
    let (xs, k, b) = (tape.value(x).data(), tape.value(kernel).data(), tape.value(bias).data());
    let out = match cfg.kind {
        MixerKind::MmConv => geom.conv_forward(xs, k, b),
        MixerKind::MmLinear => geom.linear_forward(xs, k, b),
    };
    let value = Tensor::from_parts(tape.shape(x).to_vec(), out);
    Ok(tape.push(value, vec![x, kernel, bias], MixerRule { geom, kind: cfg.kind }))
}

fn batch_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, d] => Ok((1, t, d)),
        [b, t, d] => Ok((b, t, d)),
        _ => Err(DmmError::invalid(
            op,
            format!("expected [T, d] or [B, T, d], got {shape:?}"),
        )),
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    bsz: usize,
    t: usize,
    d: usize,
    w: usize,
}

impl Geometry {
    /// Source row of tap `j` for output position `p`, if it lies inside the sequence.
    fn source(&self, p: usize, j: usize) -> Option<usize> {
        (p + j).checked_sub(self.w - 1)
    }

    fn conv_forward(&self, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
        let Self { bsz, t, d, w } = *self;
        let mut out = vec![0.0; bsz * t * d];
        for b in 0..bsz {
            for p in 0..t {
                let m = p % MODALITIES;
                let o = &mut out[(b * t + p) * d..(b * t + p + 1) * d];
                o.copy_from_slice(&bias[m * d..(m + 1) * d]);
                for j in 0..w {
                    let Some(q) = self.source(p, j) else { continue };
                    let taps = &k[(m * w + j) * d..(m * w + j + 1) * d];
                    let src = &x[(b * t + q) * d..(b * t + q + 1) * d];
                    for c in 0..d {
                        o[c] += taps[c] * src[c];
                    }
                }
            }
        }
        out
    }

    /// Positions of modality `m` across the batch, as `(batch, position)` rows.
    fn rows_of(&self, m: usize) -> Vec<(usize, usize)> {
        (0..self.bsz)
            .flat_map(|b| (m..self.t).step_by(MODALITIES).map(move |p| (b, p)))
            .collect()
    }

    /// Flattened causal windows for the given rows: `[rows, w * d]`.
    fn im2col(&self, x: &[f64], rows: &[(usize, usize)]) -> Vec<f64> {
        let Self { t, d, w, .. } = *self;
        let mut cols = vec![0.0; rows.len() * w * d];
        for (r, &(b, p)) in rows.iter().enumerate() {
            for j in 0..w {
                if let Some(q) = self.source(p, j) {
                    let dst = (r * w + j) * d;
                    cols[dst..dst + d].copy_from_slice(&x[(b * t + q) * d..(b * t + q + 1) * d]);
                }
            }
        }
        cols
    }

    fn linear_forward(&self, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
        let Self { bsz, t, d, w } = *self;
        let wd = w * d;
        let mut out = vec![0.0; bsz * t * d];
        for m in 0..MODALITIES.min(t) {
            let rows = self.rows_of(m);
            let cols = self.im2col(x, &rows);
            let mut y = vec![0.0; rows.len() * d];
            for r in 0..rows.len() {
                y[r * d..(r + 1) * d].copy_from_slice(&bias[m * d..(m + 1) * d]);
            }
            let wm = &k[m * d * wd..(m + 1) * d * wd];
            gemm(
                rows.len(),
                wd,
                d,
                1.0,
                &cols,
                Layout::row_major(wd),
                wm,
                Layout::transposed(wd),
                1.0,
                &mut y,
            );
            for (r, &(b, p)) in rows.iter().enumerate() {
                out[(b * t + p) * d..(b * t + p + 1) * d].copy_from_slice(&y[r * d..(r + 1) * d]);
            }
        }
        out
    }
}

struct MixerRule {
    geom: Geometry,
    kind: MixerKind,
}

impl Backward for MixerRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, k) = (inputs[0].data(), inputs[1].data());
        let Geometry { bsz, t, d, w } = self.geom;
        let mut gx = vec![0.0; x.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gb = vec![0.0; MODALITIES * d];
        for b in 0..bsz {
            for p in 0..t {
                let m = p % MODALITIES;
                let gp = &g[(b * t + p) * d..(b * t + p + 1) * d];
                gb[m * d..(m + 1) * d].iter_mut().zip(gp).for_each(|(a, v)| *a += v);
            }
        }
        match self.kind {
            MixerKind::MmConv => {
                for b in 0..bsz {
                    for p in 0..t {
                        let m = p % MODALITIES;
                        let gp = &g[(b * t + p) * d..(b * t + p + 1) * d];
                        for j in 0..w {
                            let Some(q) = self.geom.source(p, j) else { continue };
                            let base = (m * w + j) * d;
                            let src = (b * t + q) * d;
                            for c in 0..d {
                                gk[base + c] += gp[c] * x[src + c];
                                gx[src + c] += gp[c] * k[base + c];
                            }
                        }
                    }
                }
            }
            MixerKind::MmLinear => {
                let wd = w * d;
                for m in 0..MODALITIES.min(t) {
                    let rows = self.geom.rows_of(m);
                    let n = rows.len();
                    let mut gy = vec![0.0; n * d];
                    for (r, &(b, p)) in rows.iter().enumerate() {
                        gy[r * d..(r + 1) * d].copy_from_slice(&g[(b * t + p) * d..(b * t + p + 1) * d]);
                    }
                    let wm = &k[m * d * wd..(m + 1) * d * wd];
                    if need[1] {
                        let cols = self.geom.im2col(x, &rows);
                        let gwm = &mut gk[m * d * wd..(m + 1) * d * wd];
                        gemm(
                            d,
                            n,
                            wd,
                            1.0,
                            &gy,
                            Layout::transposed(d),
                            &cols,
                            Layout::row_major(wd),
                            0.0,
                            gwm,
                        );
                    }
                    if need[0] {
                        let mut gcols = vec![0.0; n * wd];
                        gemm(
                            n,
                            d,
                            wd,
                            1.0,
                            &gy,
                            Layout::row_major(d),
                            wm,
                            Layout::row_major(wd),
                            0.0,
                            &mut gcols,
                        );
                        for (r, &(b, p)) in rows.iter().enumerate() {
                            for j in 0..w {
                                let Some(q) = self.geom.source(p, j) else { continue };
                                let dst = &mut gx[(b * t + q) * d..(b * t + q + 1) * d];
                                let src = &gcols[(r * w + j) * d..(r * w + j + 1) * d];
                                dst.iter_mut().zip(src).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
            }
        }
        vec![need[0].then_some(gx), need[1].then_some(gk), need[2].then_some(gb)]
    }
}
