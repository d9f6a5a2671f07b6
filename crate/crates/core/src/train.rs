//! Action-prediction losses, AdamW, global-norm clipping, warmup and the
//! training loop.

use std::io::Write;

use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, BatchSampler, Dataset, NormStats};
use crate::error::{DmmError, Result};
use crate::model::{DecisionModel, ParamStore};
use crate::numkernel::tape::Backward;
use crate::numkernel::{Tape, Tensor, Var};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_updates: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Metrics rows are written every `log_every` steps and at the last step.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_updates: 100_000,
            lr: 1e-4,
            warmup_steps: 10_000,
            grad_clip: 0.25,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DmmError::invalid("TrainConfig", msg));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.log_every < 1 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }
}

/// `lr * min(1, (step + 1) / warmup)`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.lr;
    }
    cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
}

fn check_loss_shapes(op: &'static str, pred: &[usize], target: &[usize], mask: &[usize]) -> Result<()> {
    if pred != target {
        return Err(DmmError::shape(op, pred, target));
    }
    if pred.len() != 3 || mask != &pred[..2] {
        return Err(DmmError::shape(op, &pred[..pred.len().min(2)], mask));
    }
    Ok(())
}

fn mask_total(op: &'static str, mask: &Tensor) -> Result<f64> {
    let total: f64 = mask.data().iter().sum();
    if total <= 0.0 {
        return Err(DmmError::invalid(op, "mask selects no steps"));
    }
    Ok(total)
}

/// `(1 / sum mask) * sum mask * |a - a_hat|^2` over `[B, K, A]` predictions.
pub fn loss_dmm(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = masked_mse(&mut tape, p, target, mask)?;
    Ok(tape.value(l).item())
}

/// Differentiable [`loss_dmm`].
pub fn masked_mse(tape: &mut Tape, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    let op = "masked_mse";
    check_loss_shapes(op, tape.shape(pred), target.shape(), mask.shape())?;
    let total = mask_total(op, mask)?;
    let a = target.last_dim();
    let p = tape.value(pred).data();
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (row, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for j in row * a..(row + 1) * a {
            let e = p[j] - target.data()[j];
            loss += m * e * e;
            grad[j] = 2.0 * m * e / total;
        }
    }
    Ok(tape.push(Tensor::scalar(loss / total), vec![pred], Fixed(grad)))
}

/// Masked mean of `-log softmax(logits)[class]`, the class being the argmax of each target row.
pub fn masked_cross_entropy(tape: &mut Tape, logits: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    let op = "masked_cross_entropy";
    check_loss_shapes(op, tape.shape(logits), target.shape(), mask.shape())?;
    let total = mask_total(op, mask)?;
    let a = target.last_dim();
    let z = tape.value(logits).data();
    let mut loss = 0.0;
    let mut grad = vec![0.0; z.len()];
    for (row, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let zr = &z[row * a..(row + 1) * a];
        let class = argmax(&target.data()[row * a..(row + 1) * a]);
        let zmax = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = zr.iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum.ln();
        loss += m * (lse - zr[class]);
        for j in 0..a {
            let p = (zr[j] - lse).exp();
            let onehot = if j == class { 1.0 } else { 0.0 };
            grad[row * a + j] = m * (p - onehot) / total;
        }
    }
    Ok(tape.push(Tensor::scalar(loss / total), vec![logits], Fixed(grad)))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss whose gradient was computed in the forward pass.
struct Fixed(Vec<f64>);

impl Backward for Fixed {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.iter().map(|v| v * g[0]).collect())]
    }
}

/// The configured action loss for `model` on `batch`.
pub fn action_loss(tape: &mut Tape, model: &DecisionModel, pred: Var, batch: &Batch) -> Result<Var> {
    if model.config().discrete_actions {
        masked_cross_entropy(tape, pred, &batch.targets, &batch.mask)
    } else {
        masked_mse(tape, pred, &batch.targets, &batch.mask)
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(DmmError::invalid(
                "AdamW::step",
                "gradient count does not match parameters",
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.len() != p.numel() {
                return Err(DmmError::shape("AdamW::step", p.shape(), &[g.len()]));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x = *x * decay - lr * update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global norm of the gradient actually applied.
    pub applied_norm: f64,
    pub lr: f64,
}

/// Forward, loss, backward, clip and update on one batch.
pub fn train_step(
    model: &mut DecisionModel,
    opt: &mut AdamW,
    batch: &Batch,
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let step = opt.steps();
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let pred = model.forward_on(&mut tape, &vars, &batch.input, Some(dropout_rng))?;
    let loss_var = action_loss(&mut tape, model, pred, batch)?;
    let loss = tape.value(loss_var).item();
    let grads = tape.backward(loss_var).ok().filter(|_| loss.is_finite());
    let Some(grads) = grads else {
        return Err(DmmError::Diverged {
            step,
            loss,
            grad_norm: f64::NAN,
        });
    };
    let mut g = model.params().collect_grads(&vars, &grads);
    drop(tape);
    let grad_norm = clip_global_norm(&mut g, cfg.grad_clip);
    let applied_norm = global_norm(&g);
    let lr = lr_schedule(step, cfg);
    opt.step(model.params_mut(), &g, lr)?;
    Ok(StepStats {
        step,
        loss,
        grad_norm,
        applied_norm,
        lr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean loss over the last `min(100, total)` steps.
    pub tail_loss: f64,
    pub steps: u64,
}

/// Called with the number of completed updates and the current model.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(u64, &DecisionModel) -> Result<()>;

/// Runs `cfg.total_updates` steps, writing `step,loss,grad_norm,lr` rows to `metrics`.
pub fn train(
    model: &mut DecisionModel,
    dataset: &Dataset,
    norm: Option<&NormStats>,
    cfg: &TrainConfig,
    seed: u64,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    train_with_checkpoints(model, dataset, norm, cfg, seed, metrics, 0, None)
}

/// [`train`] that also calls `hook` after every `every` updates (never when `every` is 0).
#[allow(clippy::too_many_arguments)]
pub fn train_with_checkpoints(
    model: &mut DecisionModel,
    dataset: &Dataset,
    norm: Option<&NormStats>,
    cfg: &TrainConfig,
    seed: u64,
    mut metrics: Option<&mut dyn Write>,
    every: u64,
    mut hook: Option<CheckpointHook>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let sampler = BatchSampler::new(dataset, norm, model.config().context_k)?;
    let mut data_rng = stream(seed, Stream::Data);
    let mut dropout_rng = stream(seed, Stream::Dropout);
    let mut opt = AdamW::new(model.params(), cfg);
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "step,loss,grad_norm,lr")?;
    }
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let tail = cfg.total_updates.min(100);
    let mut tail_sum = 0.0;
    for step in 0..cfg.total_updates {
        let batch = sampler.sample(cfg.batch_size, &mut data_rng)?;
        let s = train_step(model, &mut opt, &batch, cfg, &mut dropout_rng)?;
        if step == 0 {
            first_loss = s.loss;
        }
        final_loss = s.loss;
        if step + tail >= cfg.total_updates {
            tail_sum += s.loss;
        }
        if let Some(w) = metrics.as_deref_mut() {
            if step % cfg.log_every == 0 || step + 1 == cfg.total_updates {
                writeln!(w, "{},{},{},{}", s.step, s.loss, s.grad_norm, s.lr)?;
                w.flush()?;
            }
        }
        if let Some(h) = hook.as_deref_mut() {
            if every > 0 && (step + 1) % every == 0 {
                h(step + 1, model)?;
            }
        }
    }
    Ok(TrainReport {
        first_loss,
        final_loss,
        tail_loss: if tail > 0 { tail_sum / tail as f64 } else { f64::NAN },
        steps: cfg.total_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::check_gradient;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mse_exact_fit_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random(&[2, 3, 4], &mut rng);
        let mask = Tensor::full(&[2, 3], 1.0);
        assert_eq!(loss_dmm(&t, &t, &mask).unwrap(), 0.0);
        let shifted = Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.5);
        assert!((loss_dmm(&shifted, &t, &mask).unwrap() - 0.25 * 4.0).abs() < 1e-12);
        assert!(loss_dmm(&t, &t, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn masked_slots_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random(&[2, 3, 2], &mut rng);
        let p = random(&[2, 3, 2], &mut rng);
        let mask = Tensor::new(&[2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut q = p.clone();
        q.data_mut()[0] += 3.0;
        q.data_mut()[7] -= 2.0;
        assert_eq!(loss_dmm(&p, &t, &mask).unwrap(), loss_dmm(&q, &t, &mask).unwrap());
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&[2, 3, 3], &mut rng);
        let mask = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let x = random(&[2, 3, 3], &mut rng);
        let e = check_gradient(|tape, v| masked_mse(tape, v, &t, &mask), &x, 1e-6).unwrap();
        assert!(e < 1e-8, "{e}");
        let e = check_gradient(|tape, v| masked_cross_entropy(tape, v, &t, &mask), &x, 1e-6).unwrap();
        assert!(e < 1e-8, "{e}");
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            lr: 1e-3,
            warmup_steps: 100,
            ..TrainConfig::default()
        };
        assert!((lr_schedule(0, &cfg) - 1e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(99, &cfg), 1e-3);
        assert_eq!(lr_schedule(5000, &cfg), 1e-3);
        let mut prev = 0.0;
        for s in 0..300 {
            let lr = lr_schedule(s, &cfg);
            assert!(lr >= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping_keeps_direction() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 0.25);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 0.25).abs() < 1e-12);
        assert!((g[0][0] / g[1][0] - 0.75).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 0.25);
        assert_eq!(small, vec![vec![0.1]]);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::new(&[3], vec![0.3, -1.7, 2.0]).unwrap());
        let before = ps.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&ps, &cfg);
        for _ in 0..5 {
            opt.step(&mut ps, &[vec![0.0; 3]], 1e-2).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
