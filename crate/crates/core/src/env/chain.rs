use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Environment, StepOutcome};
use crate::data::{Dataset, Trajectory};
use crate::error::{DmmError, Result};

/// Continuous 1-D chain with dense progress rewards.
///
/// The agent starts at 0 and moves by `step_size * a` for an action
/// `a` in `[-1, 1]`, clamped to `[0, length]`. The reward is the distance
/// gained. Episodes end at `length` or after `horizon` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseChainEnv {
    pub length: f64,
    pub step_size: f64,
    pub horizon: usize,
    x: f64,
    t: usize,
}

impl Default for DenseChainEnv {
    fn default() -> Self {
        Self {
            length: 10.0,
            step_size: 0.5,
            horizon: 40,
            x: 0.0,
            t: 0,
        }
    }
}

impl DenseChainEnv {
    pub fn position(&self) -> f64 {
        self.x
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.x / self.length]
    }

    /// The behaviour policy's noise-free action: faster far from the end.
    pub fn expert_action(&self, x: f64) -> f64 {
        0.3 + 0.6 * (1.0 - x / self.length)
    }
}

impl Environment for DenseChainEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn discrete(&self) -> bool {
        false
    }

    fn reset(&mut self) -> Vec<f64> {
        self.x = 0.0;
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 1 {
            return Err(DmmError::shape("DenseChainEnv::step", &[1], &[action.len()]));
        }
        if !action[0].is_finite() {
            return Err(DmmError::NonFinite {
                op: "DenseChainEnv::step",
            });
        }
        let a = action[0].clamp(-1.0, 1.0);
        let next = (self.x + self.step_size * a).clamp(0.0, self.length);
        let reward = next - self.x;
        self.x = next;
        self.t += 1;
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            done: self.x >= self.length || self.t >= self.horizon,
        })
    }

    fn random_action(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.gen_range(-1.0..=1.0)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainDatasetSpec {
    pub n_trajectories: usize,
    /// Half-width of the uniform jitter added to the expert action.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ChainDatasetSpec {
    fn default() -> Self {
        Self {
            n_trajectories: 50,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Noisy expert episodes on the chain.
pub fn generate_chain_dataset(env: &DenseChainEnv, spec: &ChainDatasetSpec) -> Result<Dataset> {
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(DmmError::invalid(
            "generate_chain_dataset",
            "noise must be non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_trajectories);
    for _ in 0..spec.n_trajectories {
        let mut e = env.clone();
        let mut obs = e.reset();
        let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
        loop {
            let jitter = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            let a = (e.expert_action(e.position()) + jitter).clamp(-1.0, 1.0);
            let step = e.step(&[a])?;
            states.push(obs);
            actions.push(vec![a]);
            rewards.push(step.reward);
            obs = step.observation;
            if step.done {
                break;
            }
        }
        out.push(Trajectory::from_rows(&states, &actions, &rewards)?);
    }
    Dataset::new(out)
}
