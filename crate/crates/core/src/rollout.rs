//! Return-conditioned autoregressive evaluation.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::NormStats;
use crate::env::{one_hot, Environment};
use crate::error::{DmmError, Result};
use crate::model::{DecisionModel, ModelInput};
use crate::numkernel::Tensor;
use crate::train::argmax;

/// The most recent `K` steps of (rtg, normalized state, action).
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    k: usize,
    rtg: VecDeque<f64>,
    states: VecDeque<Vec<f64>>,
    actions: VecDeque<Vec<f64>>,
}

impl Context {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            rtg: VecDeque::new(),
            states: VecDeque::new(),
            actions: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }

    /// Opens a step whose action is still pending.
    pub fn push(&mut self, rtg: f64, state: Vec<f64>, action_dim: usize) {
        self.rtg.push_back(rtg);
        self.states.push_back(state);
        self.actions.push_back(vec![0.0; action_dim]);
        while self.rtg.len() > self.k {
            self.rtg.pop_front();
            self.states.pop_front();
            self.actions.pop_front();
        }
    }

    pub fn set_last_action(&mut self, action: Vec<f64>) {
        if let Some(a) = self.actions.back_mut() {
            *a = action;
        }
    }

    pub fn states_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.states.iter_mut()
    }

    /// Front-padded `[1, K, .]` model input.
    pub fn to_input(&self, state_dim: usize, action_dim: usize) -> Result<ModelInput> {
        let (k, n) = (self.k, self.len());
        let pad = k - n;
        let mut rtg = vec![0.0; k];
        let mut states = vec![0.0; k * state_dim];
        let mut actions = vec![0.0; k * action_dim];
        for i in 0..n {
            let slot = pad + i;
            rtg[slot] = self.rtg[i];
            states[slot * state_dim..(slot + 1) * state_dim].copy_from_slice(&self.states[i]);
            actions[slot * action_dim..(slot + 1) * action_dim].copy_from_slice(&self.actions[i]);
        }
        Ok(ModelInput {
            rtg: Tensor::new(&[1, k, 1], rtg)?,
            states: Tensor::new(&[1, k, state_dim], states)?,
            actions: Tensor::new(&[1, k, action_dim], actions)?,
        })
    }
}

/// The action for the last context step: argmax one-hot for discrete heads.
pub fn policy_action(model: &DecisionModel, ctx: &Context) -> Result<Vec<f64>> {
    let cfg = model.config();
    let input = ctx.to_input(cfg.state_dim, cfg.action_dim)?;
    let pred = model.predict(&input)?;
    let a = cfg.action_dim;
    let last = &pred.data()[pred.numel() - a..];
    if last.iter().any(|v| !v.is_finite()) {
        return Err(DmmError::NonFinite { op: "policy_action" });
    }
    Ok(if cfg.discrete_actions {
        one_hot(argmax(last), a)
    } else {
        last.to_vec()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub rtg: f64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub episode_return: f64,
    pub steps: usize,
    pub trace: Vec<TraceStep>,
}

impl RolloutResult {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("t,rtg,reward,state,action\n");
        for st in &self.trace {
            let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                st.t,
                st.rtg,
                st.reward,
                join(&st.state),
                join(&st.action)
            );
        }
        s
    }
}

/// One episode conditioned on `initial_rtg`, subtracting each reward from the target.
pub fn rollout(
    model: &DecisionModel,
    env: &mut dyn Environment,
    norm: Option<&NormStats>,
    initial_rtg: f64,
) -> Result<RolloutResult> {
    let cfg = model.config();
    if env.state_dim() != cfg.state_dim || env.action_dim() != cfg.action_dim {
        return Err(DmmError::shape(
            "rollout",
            &[cfg.state_dim, cfg.action_dim],
            &[env.state_dim(), env.action_dim()],
        ));
    }
    let mut ctx = Context::new(cfg.context_k);
    let mut obs = env.reset();
    let mut rtg = initial_rtg;
    let mut ret = 0.0;
    let mut trace = Vec::new();
    for t in 0.. {
        let state = norm.map_or_else(|| obs.clone(), |n| n.transform(&obs));
        ctx.push(rtg, state, cfg.action_dim);
        let action = policy_action(model, &ctx)?;
        let out = env.step(&action)?;
        trace.push(TraceStep {
            t,
            rtg,
            state: obs,
            action: action.clone(),
            reward: out.reward,
        });
        ctx.set_last_action(action);
        ret += out.reward;
        rtg -= out.reward;
        obs = out.observation;
        if out.done {
            return Ok(RolloutResult {
                episode_return: ret,
                steps: t + 1,
                trace,
            });
        }
    }
    unreachable!("episodes terminate")
}

/// `100 (ret - random) / (expert - random)`.
pub fn normalized_score(ret: f64, random_return: f64, expert_return: f64) -> Result<f64> {
    let span = expert_return - random_return;
    if !(span > 0.0 && span.is_finite()) {
        return Err(DmmError::invalid(
            "normalized_score",
            "expert return must exceed random return",
        ));
    }
    Ok(100.0 * (ret - random_return) / span)
}

/// Mean return of a uniformly random policy over `episodes` seeded episodes.
pub fn random_baseline(env: &mut dyn Environment, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(DmmError::invalid("random_baseline", "need at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset();
        loop {
            let a = env.random_action(&mut rng);
            let out = env.step(&a)?;
            total += out.reward;
            if out.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub initial_rtg: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
    /// Fraction of episodes whose return reached `target_return`.
    pub success_rate: f64,
    pub target_return: f64,
    pub mean_steps: f64,
    pub returns: Vec<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "episodes {}\ninitial_rtg {}\nmean_return {}\nstd_return {}\nnormalized_score {}\nsuccess_rate {}\ntarget_return {}\nmean_steps {}\n",
            self.episodes,
            self.initial_rtg,
            self.mean_return,
            self.std_return,
            self.normalized_score,
            self.success_rate,
            self.target_return,
            self.mean_steps
        )
    }
}

/// Runs `episodes` rollouts on fresh environments from `make_env`.
pub fn evaluate(
    model: &DecisionModel,
    make_env: &dyn Fn() -> Box<dyn Environment>,
    norm: Option<&NormStats>,
    episodes: usize,
    initial_rtg: f64,
    random_return: f64,
    expert_return: f64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(DmmError::invalid("evaluate", "need at least one episode"));
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut steps = 0usize;
    for _ in 0..episodes {
        let mut env = make_env();
        let r = rollout(model, env.as_mut(), norm, initial_rtg)?;
        returns.push(r.episode_return);
        steps += r.steps;
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let hits = returns.iter().filter(|&&r| r >= expert_return - 1e-9).count();
    Ok(EvalReport {
        episodes,
        initial_rtg,
        mean_return: mean,
        std_return: std,
        normalized_score: normalized_score(mean, random_return, expert_return)?,
        success_rate: hits as f64 / n,
        target_return: expert_return,
        mean_steps: steps as f64 / n,
        returns,
    })
}
