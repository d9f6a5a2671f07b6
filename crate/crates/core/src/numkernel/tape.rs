//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and a backward
//! rule. Nodes are pushed in evaluation order, so a single reverse sweep over
//! the tape visits each node after all of its consumers.
//!
//! Operations are coarse-grained: a layer norm, a token mixer, or a whole
//! selective scan is one node with a hand-written adjoint.

use rand::Rng;

use super::gemm::{gemm, Layout};
use super::kernels::{self, Activation, NormCache};
use super::tensor::Tensor;
use crate::error::{DmmError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Adjoint of one recorded operation.
///
/// `backward` receives the forward values of the inputs, the node's own
/// output, the upstream gradient and a mask of which inputs need gradients.
/// It returns one optional gradient buffer per input, in input order.
pub(crate) trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, gout: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut value: Tensor, tracked: bool) -> Var {
        value.set_requires_grad(tracked);
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: Vec<Var>, rule: impl Backward + 'static) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            inputs,
            rule: tracked.then(|| Box::new(rule) as Box<dyn Backward>),
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(DmmError::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", out.shape()),
            ));
        }
        out.check_finite("backward")?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].tracked).collect();
            let contributions = rule.backward(&inputs, &node.value, &gout, &need);
            for (v, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].tracked {
                    continue;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => grads[v.0] = Some(g),
                }
            }
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DmmError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DmmError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, rule: impl Backward + 'static) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, vec![x], rule)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, vec![a, b], AddRule))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, vec![a, b], MulRule))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, ScaleRule(s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, ExpRule)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, SoftplusRule)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, SigmoidRule)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, TanhRule)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Silu => self.unary(x, |v| Activation::Silu.apply(v), ActRule(kind)),
            Activation::Gelu => self.unary(x, |v| Activation::Gelu.apply(v), ActRule(kind)),
            Activation::Relu => self.unary(x, |v| Activation::Relu.apply(v), ActRule(kind)),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), vec![x], SumRule)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DmmError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(n),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), vec![a, b], MatMulRule { m, k, n }))
    }

    /// `x @ w^T + b` over the last axis: `x: [.., in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != fan_in {
            return Err(DmmError::shape("linear", &[sw[0], fan_in], &sw));
        }
        let fan_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(DmmError::shape("linear bias", &[fan_out], self.shape(b)));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * fan_out..(r + 1) * fan_out].copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            fan_in,
            fan_out,
            1.0,
            self.value(x).data(),
            Layout::row_major(fan_in),
            self.value(w).data(),
            Layout::transposed(fan_in),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = fan_out;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rule = LinearRule { rows, fan_in, fan_out };
        Ok(self.push(Tensor::from_parts(shape, out), inputs, rule))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(DmmError::invalid("layer_norm", "eps must be positive"));
        }
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(DmmError::shape("layer_norm", &[d], self.shape(gamma)));
        }
        let xt = self.value(x);
        let mut out = vec![0.0; xt.numel()];
        let cache = kernels::layer_norm_rows(
            xt.data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
        );
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(value, vec![x, gamma, beta], LayerNormRule { d, cache }))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if len == 0 || start + len > d {
            return Err(DmmError::invalid(
                "slice_last",
                format!("range {start}..{} outside last axis {d}", start + len),
            ));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, vec![x], SliceRule { d, start, len }))
    }

    /// Interleaves three `[B, K, d]` streams into `[B, 3K, d]` as (a_0, b_0, c_0, a_1, ...).
    pub fn interleave3(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        self.same_shape("interleave3", a, b)?;
        self.same_shape("interleave3", a, c)?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(DmmError::invalid("interleave3", "expected [B, K, d] operands"));
        }
        let (bsz, k, d) = (shape[0], shape[1], shape[2]);
        let parts = [self.value(a).data(), self.value(b).data(), self.value(c).data()];
        let mut out = vec![0.0; bsz * 3 * k * d];
        for bi in 0..bsz {
            for t in 0..k {
                for (m, src) in parts.iter().enumerate() {
                    let dst = ((bi * 3 * k) + 3 * t + m) * d;
                    let s = (bi * k + t) * d;
                    out[dst..dst + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let value = Tensor::from_parts(vec![bsz, 3 * k, d], out);
        Ok(self.push(value, vec![a, b, c], InterleaveRule { bsz, k, d }))
    }

    /// Picks positions `offset, offset + stride, ...` of the middle axis of `[B, T, d]`.
    pub fn gather_positions(&mut self, x: Var, offset: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || stride == 0 || offset >= shape[1] {
            return Err(DmmError::invalid(
                "gather_positions",
                format!("bad gather on {shape:?}"),
            ));
        }
        let (bsz, t, d) = (shape[0], shape[1], shape[2]);
        let picked = (t - offset).div_ceil(stride);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * picked * d);
        for bi in 0..bsz {
            for k in 0..picked {
                let p = offset + k * stride;
                out.extend_from_slice(&src[(bi * t + p) * d..(bi * t + p + 1) * d]);
            }
        }
        let value = Tensor::from_parts(vec![bsz, picked, d], out);
        let rule = GatherRule {
            bsz,
            t,
            d,
            offset,
            stride,
            picked,
        };
        Ok(self.push(value, vec![x], rule))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(DmmError::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, vec![x], MaskRule(mask)))
    }
}

struct AddRule;
impl Backward for AddRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        need.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct MulRule;
impl Backward for MulRule {
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let prod = |other: &Tensor| g.iter().zip(other.data()).map(|(a, b)| a * b).collect();
        vec![need[0].then(|| prod(x[1])), need[1].then(|| prod(x[0]))]
    }
}

struct ScaleRule(f64);
impl Backward for ScaleRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

/// Elementwise rule whose local derivative is a function of (input, output).
fn pointwise(x: &Tensor, y: &Tensor, g: &[f64], d: impl Fn(f64, f64) -> f64) -> Vec<Option<Vec<f64>>> {
    let out = g
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(gv, (&xv, &yv))| gv * d(xv, yv))
        .collect();
    vec![Some(out)]
}

struct ExpRule;
impl Backward for ExpRule {
    fn backward(&self, x: &[&Tensor], y: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        pointwise(x[0], y, g, |_, y| y)
    }
}

struct SoftplusRule;
impl Backward for SoftplusRule {
    fn backward(&self, x: &[&Tensor], y: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        pointwise(x[0], y, g, |x, _| kernels::sigmoid(x))
    }
}

struct SigmoidRule;
impl Backward for SigmoidRule {
    fn backward(&self, x: &[&Tensor], y: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        pointwise(x[0], y, g, |_, y| y * (1.0 - y))
    }
}

struct TanhRule;
impl Backward for TanhRule {
    fn backward(&self, x: &[&Tensor], y: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        pointwise(x[0], y, g, |_, y| 1.0 - y * y)
    }
}

struct ActRule(Activation);
impl Backward for ActRule {
    fn backward(&self, x: &[&Tensor], y: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        match self.0 {
            Activation::Silu => pointwise(x[0], y, g, |x, _| Activation::Silu.derivative(x)),
            Activation::Gelu => pointwise(x[0], y, g, |x, _| Activation::Gelu.derivative(x)),
            Activation::Relu => pointwise(x[0], y, g, |x, _| Activation::Relu.derivative(x)),
        }
    }
}

struct SumRule;
impl Backward for SumRule {
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; x[0].numel()])]
    }
}

struct MatMulRule {
    m: usize,
    k: usize,
    n: usize,
}
impl Backward for MatMulRule {
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let Self { m, k, n } = *self;
        let ga = need[0].then(|| {
            let mut ga = vec![0.0; m * k];
            gemm(
                m,
                n,
                k,
                1.0,
                g,
                Layout::row_major(n),
                x[1].data(),
                Layout::transposed(n),
                0.0,
                &mut ga,
            );
            ga
        });
        let gb = need[1].then(|| {
            let mut gb = vec![0.0; k * n];
            gemm(
                k,
                m,
                n,
                1.0,
                x[0].data(),
                Layout::transposed(k),
                g,
                Layout::row_major(n),
                0.0,
                &mut gb,
            );
            gb
        });
        vec![ga, gb]
    }
}

struct LinearRule {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}
impl Backward for LinearRule {
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let Self { rows, fan_in, fan_out } = *self;
        let gx = need[0].then(|| {
            let mut gx = vec![0.0; rows * fan_in];
            gemm(
                rows,
                fan_out,
                fan_in,
                1.0,
                g,
                Layout::row_major(fan_out),
                x[1].data(),
                Layout::row_major(fan_in),
                0.0,
                &mut gx,
            );
            gx
        });
        let gw = need[1].then(|| {
            let mut gw = vec![0.0; fan_out * fan_in];
            gemm(
                fan_out,
                rows,
                fan_in,
                1.0,
                g,
                Layout::transposed(fan_out),
                x[0].data(),
                Layout::row_major(fan_in),
                0.0,
                &mut gw,
            );
            gw
        });
        let mut out = vec![gx, gw];
        if x.len() == 3 {
            out.push(need[2].then(|| {
                let mut gb = vec![0.0; fan_out];
                for r in 0..rows {
                    gb.iter_mut()
                        .zip(&g[r * fan_out..(r + 1) * fan_out])
                        .for_each(|(a, b)| *a += b);
                }
                gb
            }));
        }
        out
    }
}

struct LayerNormRule {
    d: usize,
    cache: NormCache,
}
impl Backward for LayerNormRule {
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; x[0].numel()];
        let mut ggamma = vec![0.0; self.d];
        let mut gbeta = vec![0.0; self.d];
        kernels::layer_norm_backward(&self.cache, self.d, x[1].data(), g, &mut gx, &mut ggamma, &mut gbeta);
        vec![Some(gx), Some(ggamma), Some(gbeta)]
    }
}

struct SliceRule {
    d: usize,
    start: usize,
    len: usize,
}
impl Backward for SliceRule {
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; x[0].numel()];
        for (r, chunk) in g.chunks_exact(self.len).enumerate() {
            gx[r * self.d + self.start..r * self.d + self.start + self.len].copy_from_slice(chunk);
        }
        vec![Some(gx)]
    }
}

struct InterleaveRule {
    bsz: usize,
    k: usize,
    d: usize,
}
impl Backward for InterleaveRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let Self { bsz, k, d } = *self;
        (0..3)
            .map(|m| {
                need[m].then(|| {
                    let mut out = vec![0.0; bsz * k * d];
                    for bi in 0..bsz {
                        for t in 0..k {
                            let src = ((bi * 3 * k) + 3 * t + m) * d;
                            let dst = (bi * k + t) * d;
                            out[dst..dst + d].copy_from_slice(&g[src..src + d]);
                        }
                    }
                    out
                })
            })
            .collect()
    }
}

struct GatherRule {
    bsz: usize,
    t: usize,
    d: usize,
    offset: usize,
    stride: usize,
    picked: usize,
}
impl Backward for GatherRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let Self {
            bsz,
            t,
            d,
            offset,
            stride,
            picked,
        } = *self;
        let mut gx = vec![0.0; bsz * t * d];
        for bi in 0..bsz {
            for k in 0..picked {
                let p = offset + k * stride;
                let src = (bi * picked + k) * d;
                gx[(bi * t + p) * d..(bi * t + p + 1) * d].copy_from_slice(&g[src..src + d]);
            }
        }
        vec![Some(gx)]
    }
}

struct MaskRule(Vec<f64>);
impl Backward for MaskRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(&self.0).map(|(a, m)| a * m).collect())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(tape.value(s).item(), 5.0);
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(4.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let x = Tensor::full(&[1000], 1.0);
        let run = |seed| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = tape.dropout(v, 0.1, &mut rng).unwrap();
            tape.value(y).clone()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert_ne!(a, run(8));
        let keep = 1.0 / 0.9;
        assert!(a.data().iter().all(|&v| v == 0.0 || v == keep));
        let zeros = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&zeros), "{zeros} zeros");
    }

    #[test]
    fn interleave_then_gather_recovers_stream() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| 100.0 + i as f64));
        let c = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| 200.0 + i as f64));
        let s = tape.interleave3(a, b, c).unwrap();
        assert_eq!(tape.shape(s), &[2, 9, 2]);
        assert_eq!(&tape.value(s).data()[..6], &[0.0, 1.0, 100.0, 101.0, 200.0, 201.0]);
        let back = tape.gather_positions(s, 1, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
    }
}
