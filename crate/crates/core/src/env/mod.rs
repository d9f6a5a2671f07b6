//! Synthetic environments and offline dataset generators.

mod chain;
mod grid;

pub use chain::{generate_chain_dataset, ChainDatasetSpec, DenseChainEnv};
pub use grid::{
    generate_stitch_dataset, shortest_path_len, value_iteration, Cell, GridAction, GridStitchEnv, StitchDatasetSpec,
    StitchFamily, ValueTable,
};

use rand::RngCore;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with real-valued observations.
pub trait Environment {
    fn state_dim(&self) -> usize;

    fn action_dim(&self) -> usize;

    /// Actions are one-hot choices rather than continuous vectors.
    fn discrete(&self) -> bool;

    fn reset(&mut self) -> Vec<f64>;

    /// Discrete environments take the argmax of `action`.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// A uniformly random action in the environment's encoding.
    fn random_action(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}
