//! The decision model: per-modality embeddings, a stack of mixer-fronted SSM
//! blocks, a final norm and an action head read at state tokens.

pub mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Precision};
pub use config::{ModelConfig, Variant};
pub use params::{ParamId, ParamStore};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DmmError, Result};
use crate::mixer::{mixer_op, MixerConfig, MixerWeights};
use crate::numkernel::{Tape, Tensor, Var};
use crate::ssm::{selective_ssm, SelectiveSSMParams, SelectiveVars};

/// Conditioning inputs for a batch of `K`-step windows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[B, K, 1]`, unscaled returns-to-go.
    pub rtg: Tensor,
    /// `[B, K, state_dim]`.
    pub states: Tensor,
    /// `[B, K, action_dim]`.
    pub actions: Tensor,
}

impl ModelInput {
    pub fn batch_size(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.states.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mixer {
    norm: Norm,
    kernel: ParamId,
    bias: ParamId,
    cfg: MixerConfig,
}

#[derive(Clone, Copy, Debug)]
struct Ssm {
    a_log: ParamId,
    w_delta: ParamId,
    delta_bias: ParamId,
    w_b: ParamId,
    w_c: ParamId,
    d: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    mixer: Mixer,
    norm: Norm,
    in_proj: Linear,
    inner_mixer: Option<Mixer>,
    ssm: Ssm,
    out_proj: Linear,
}

/// A decision model and its parameters.
#[derive(Clone, Debug)]
pub struct DecisionModel {
    cfg: ModelConfig,
    params: ParamStore,
    embed: [Linear; 3],
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Linear,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl DecisionModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let (d, di) = (cfg.d, cfg.d_inner());
        let embed = [
            add_linear(&mut ps, "embed.rtg", d, 1, true, rng),
            add_linear(&mut ps, "embed.state", d, cfg.state_dim, true, rng),
            add_linear(&mut ps, "embed.action", d, cfg.action_dim, true, rng),
        ];
        let mut blocks = Vec::new();
        for i in 0..cfg.n_layers {
            let p = format!("blocks.{i}");
            let mixer = add_mixer(&mut ps, &format!("{p}.mixer"), cfg.mixer_config(), rng);
            let norm = add_norm(&mut ps, &format!("{p}.norm"), d);
            let in_proj = add_linear(&mut ps, &format!("{p}.in_proj"), 2 * di, d, false, rng);
            let inner_mixer = (cfg.variant == Variant::Double)
                .then(|| add_mixer(&mut ps, &format!("{p}.inner_mixer"), cfg.inner_mixer_config(), rng));
            let s = SelectiveSSMParams::init(di, cfg.n_state, rng);
            let ssm = Ssm {
                a_log: ps.add(format!("{p}.ssm.a_log"), s.a_log),
                w_delta: ps.add(format!("{p}.ssm.w_delta"), s.w_delta),
                delta_bias: ps.add(format!("{p}.ssm.delta_bias"), s.delta_bias),
                w_b: ps.add(format!("{p}.ssm.w_b"), s.w_b),
                w_c: ps.add(format!("{p}.ssm.w_c"), s.w_c),
                d: ps.add(format!("{p}.ssm.d"), s.d),
            };
            let out_proj = add_linear(&mut ps, &format!("{p}.out_proj"), d, di, false, rng);
            blocks.push(Block {
                mixer,
                norm,
                in_proj,
                inner_mixer,
                ssm,
                out_proj,
            });
        }
        let final_norm = add_norm(&mut ps, "final_norm", d);
        let head = add_linear(&mut ps, "head", cfg.action_dim, d, true, rng);
        Ok(Self {
            cfg,
            params: ps,
            embed,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Zeroes every mixer kernel and bias, turning each mixer stage into a pure residual.
    pub fn zero_mixers(&mut self, inner_only: bool) {
        let mixers: Vec<Mixer> = self
            .blocks
            .iter()
            .flat_map(|b| [(!inner_only).then_some(b.mixer), b.inner_mixer].into_iter().flatten())
            .collect();
        for m in mixers {
            self.params.get_mut(m.kernel).data_mut().fill(0.0);
            self.params.get_mut(m.bias).data_mut().fill(0.0);
        }
    }

    fn check_input(&self, inp: &ModelInput) -> Result<()> {
        let op = "model input";
        let s = inp.states.shape();
        if s.len() != 3 || s[2] != self.cfg.state_dim {
            return Err(DmmError::shape(op, &[s[0], s[1], self.cfg.state_dim], s));
        }
        let (b, k) = (s[0], s[1]);
        if inp.rtg.shape() != [b, k, 1] {
            return Err(DmmError::shape(op, &[b, k, 1], inp.rtg.shape()));
        }
        if inp.actions.shape() != [b, k, self.cfg.action_dim] {
            return Err(DmmError::shape(op, &[b, k, self.cfg.action_dim], inp.actions.shape()));
        }
        Ok(())
    }

    /// Interleaved token embeddings `[B, 3K, d]`, ordered (rtg, state, action) per step.
    pub fn embed_on(&self, tape: &mut Tape, v: &[Var], inp: &ModelInput) -> Result<Var> {
        self.check_input(inp)?;
        let scale = 1.0 / self.cfg.rtg_scale;
        let rtg = Tensor::from_fn(inp.rtg.shape(), |i| inp.rtg.data()[i] * scale);
        let sources = [rtg, inp.states.clone(), inp.actions.clone()];
        let mut parts = [Var(0); 3];
        for ((slot, lin), src) in parts.iter_mut().zip(&self.embed).zip(sources) {
            let x = tape.constant(src);
            *slot = tape.linear(x, v[lin.w.0], lin.b.map(|b| v[b.0]))?;
        }
        tape.interleave3(parts[0], parts[1], parts[2])
    }

    fn norm_on(&self, tape: &mut Tape, v: &[Var], n: Norm, x: Var) -> Result<Var> {
        tape.layer_norm(x, v[n.gamma.0], v[n.beta.0], self.cfg.ln_eps)
    }

    fn dropout_on(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng.as_deref_mut() {
            Some(r) if self.cfg.dropout > 0.0 => tape.dropout(x, self.cfg.dropout, r),
            _ => Ok(x),
        }
    }

    /// `x + dropout(MMTM(LN(x)))`.
    fn mixer_residual_on(
        &self,
        tape: &mut Tape,
        v: &[Var],
        m: Mixer,
        x: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n = self.norm_on(tape, v, m.norm, x)?;
        let mixed = mixer_op(tape, n, v[m.kernel.0], v[m.bias.0], &m.cfg)?;
        let mixed = self.dropout_on(tape, mixed, rng)?;
        tape.add(x, mixed)
    }

    /// One block on `[B, T, d]` tokens.
    pub fn block_on(
        &self,
        tape: &mut Tape,
        v: &[Var],
        index: usize,
        h: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let blk = self.blocks[index];
        let di = self.cfg.d_inner();
        let act = self.cfg.activation;
        let h1 = self.mixer_residual_on(tape, v, blk.mixer, h, rng)?;
        let z = self.norm_on(tape, v, blk.norm, h1)?;
        let xz = tape.linear(z, v[blk.in_proj.w.0], None)?;
        let mut path = tape.slice_last(xz, 0, di)?;
        let gate = tape.slice_last(xz, di, di)?;
        if let Some(m) = blk.inner_mixer {
            path = self.mixer_residual_on(tape, v, m, path, rng)?;
        }
        let path = tape.activation(path, act);
        let s = blk.ssm;
        let vars = SelectiveVars {
            a_log: v[s.a_log.0],
            w_delta: v[s.w_delta.0],
            delta_bias: v[s.delta_bias.0],
            w_b: v[s.w_b.0],
            w_c: v[s.w_c.0],
            d: v[s.d.0],
        };
        let y = selective_ssm(tape, path, &vars, self.cfg.scan)?;
        let gate = tape.activation(gate, act);
        let y = tape.mul(y, gate)?;
        let out = tape.linear(y, v[blk.out_proj.w.0], None)?;
        let out = self.dropout_on(tape, out, rng)?;
        tape.add(h1, out)
    }

    /// Block stack plus final norm: `[B, T, d] -> [B, T, d]`.
    pub fn trunk_on(&self, tape: &mut Tape, v: &[Var], tokens: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mut h = tokens;
        for i in 0..self.blocks.len() {
            h = self.block_on(tape, v, i, h, &mut rng)?;
        }
        self.norm_on(tape, v, self.final_norm, h)
    }

    /// Action head on the state-token positions of the trunk output: `[B, K, action_dim]`.
    pub fn head_on(&self, tape: &mut Tape, v: &[Var], hidden: Var) -> Result<Var> {
        let at_states = tape.gather_positions(hidden, 1, 3)?;
        let out = tape.linear(at_states, v[self.head.w.0], self.head.b.map(|b| v[b.0]))?;
        Ok(if self.cfg.action_tanh && !self.cfg.discrete_actions {
            tape.tanh(out)
        } else {
            out
        })
    }

    /// Full forward pass. Dropout is active only when `rng` is given.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        v: &[Var],
        inp: &ModelInput,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let tokens = self.embed_on(tape, v, inp)?;
        let hidden = self.trunk_on(tape, v, tokens, rng)?;
        self.head_on(tape, v, hidden)
    }

    fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    /// Evaluation-mode predictions `[B, K, action_dim]` (tanh-squashed or logits).
    pub fn predict(&self, inp: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.constants(&mut tape);
        let y = self.forward_on(&mut tape, &v, inp, None)?;
        Ok(tape.value(y).clone())
    }

    pub fn embed(&self, inp: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.constants(&mut tape);
        let y = self.embed_on(&mut tape, &v, inp)?;
        Ok(tape.value(y).clone())
    }

    /// Evaluation-mode trunk on a given token batch `[B, T, d]`.
    pub fn trunk(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.constants(&mut tape);
        let x = tape.constant(tokens.clone());
        let y = self.trunk_on(&mut tape, &v, x, None)?;
        Ok(tape.value(y).clone())
    }

    /// Evaluation-mode single block on `[B, T, d]` tokens.
    pub fn block_forward(&self, index: usize, tokens: &Tensor) -> Result<Tensor> {
        if index >= self.blocks.len() {
            return Err(DmmError::invalid("block_forward", format!("no block {index}")));
        }
        let mut tape = Tape::new();
        let v = self.constants(&mut tape);
        let x = tape.constant(tokens.clone());
        let y = self.block_on(&mut tape, &v, index, x, &mut None)?;
        Ok(tape.value(y).clone())
    }
}

fn add_linear(
    ps: &mut ParamStore,
    name: &str,
    fan_out: usize,
    fan_in: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Linear {
    Linear {
        w: ps.add(format!("{name}.weight"), uniform(&[fan_out, fan_in], fan_in, rng)),
        b: bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
    }
}

fn add_norm(ps: &mut ParamStore, name: &str, d: usize) -> Norm {
    Norm {
        gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
        beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[d])),
    }
}

fn add_mixer(ps: &mut ParamStore, name: &str, cfg: MixerConfig, rng: &mut impl Rng) -> Mixer {
    let norm = add_norm(ps, &format!("{name}.norm"), cfg.d);
    let w = MixerWeights::init(&cfg, rng);
    Mixer {
        norm,
        kernel: ps.add(format!("{name}.kernel"), w.kernel),
        bias: ps.add(format!("{name}.bias"), w.bias),
        cfg,
    }
}

/// Learnable scalars of one token mixer stage including its pre-norm.
pub fn mixer_stage_parameters(cfg: &MixerConfig) -> usize {
    cfg.parameter_count() + 2 * cfg.d
}

/// Closed-form parameter count.
///
/// Embeddings `(1 + s + a) d + 3d`; per block a mixer stage on `d`, a norm
/// `2d`, `in_proj 2 Di d`, an optional mixer stage on `Di`, the selective SSM
/// `Di N + Di^2 + Di + 2 N Di + Di` and `out_proj d Di`; final norm `2d`;
/// head `a d + a`.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let (d, di, n) = (cfg.d, cfg.d_inner(), cfg.n_state);
    let (s, a) = (cfg.state_dim, cfg.action_dim);
    let embed = (1 + s + a) * d + 3 * d;
    let ssm = di * n + di * di + di + 2 * n * di + di;
    let mut block = mixer_stage_parameters(&cfg.mixer_config()) + 2 * d + 2 * di * d + ssm + d * di;
    if cfg.variant == Variant::Double {
        block += mixer_stage_parameters(&cfg.inner_mixer_config());
    }
    embed + cfg.n_layers * block + 2 * d + a * d + a
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d: 6,
            n_state: 3,
            expand: 2,
            context_k: 3,
            state_dim: 2,
            action_dim: 2,
            variant,
            ..ModelConfig::default()
        }
    }

    fn input(b: usize, k: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInput {
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        ModelInput {
            rtg: r(&[b, k, 1]),
            states: r(&[b, k, cfg.state_dim]),
            actions: r(&[b, k, cfg.action_dim]),
        }
    }

    #[test]
    fn closed_form_count_matches_store() {
        for variant in [Variant::Single, Variant::Double] {
            let cfg = tiny(variant);
            let m = DecisionModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.num_parameters(), count_parameters(&cfg));
        }
    }

    #[test]
    fn prediction_shape_and_range() {
        let cfg = tiny(Variant::Single);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DecisionModel::new(cfg.clone(), &mut rng).unwrap();
        let inp = input(2, 3, &cfg, &mut rng);
        let y = m.predict(&inp).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(m.predict(&inp).unwrap(), y);
    }

    #[test]
    fn embedding_interleaves_modalities() {
        let cfg = tiny(Variant::Single);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DecisionModel::new(cfg.clone(), &mut rng).unwrap();
        let zero = ModelInput {
            rtg: Tensor::zeros(&[1, 2, 1]),
            states: Tensor::zeros(&[1, 2, 2]),
            actions: Tensor::zeros(&[1, 2, 2]),
        };
        let tokens = m.embed(&zero).unwrap();
        assert_eq!(tokens.shape(), &[1, 6, 6]);
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_input() {
        let cfg = tiny(Variant::Single);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DecisionModel::new(cfg.clone(), &mut rng).unwrap();
        let mut inp = input(1, 3, &cfg, &mut rng);
        inp.states = Tensor::zeros(&[1, 3, 5]);
        assert!(m.predict(&inp).is_err());
    }
}
