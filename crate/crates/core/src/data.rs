//! Offline trajectories: storage, returns-to-go, normalization and batching.
//!
//! On disk a dataset is JSON lines, one trajectory per line with the keys
//! `states`, `actions` and `rewards`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmmError, Result};
use crate::model::ModelInput;
use crate::numkernel::Tensor;

pub const STD_FLOOR: f64 = 1e-6;

/// Suffix sums of `rewards`.
pub fn compute_rtg(rewards: &Tensor) -> Result<Tensor> {
    if rewards.shape().len() != 1 {
        return Err(DmmError::invalid("compute_rtg", "rewards must be one-dimensional"));
    }
    let mut acc = 0.0;
    let mut rtg = vec![0.0; rewards.numel()];
    for (slot, r) in rtg.iter_mut().zip(rewards.data()).rev() {
        acc += r;
        *slot = acc;
    }
    Tensor::new(rewards.shape(), rtg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Tensor,
    actions: Tensor,
    rewards: Tensor,
    rtg: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Record {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}

fn rows_to_tensor(rows: &[Vec<f64>], what: &str) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(DmmError::Format(format!(
            "{what} rows must be non-empty and equally sized"
        )));
    }
    Tensor::new(&[rows.len(), width], rows.concat())
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

impl Trajectory {
    /// `states: [T, s]`, `actions: [T, a]`, `rewards: [T]`.
    pub fn new(states: Tensor, actions: Tensor, rewards: Tensor) -> Result<Self> {
        let t = rewards.numel();
        if rewards.shape().len() != 1 {
            return Err(DmmError::invalid("Trajectory", "rewards must be one-dimensional"));
        }
        if states.shape().len() != 2 || states.shape()[0] != t {
            return Err(DmmError::shape(
                "Trajectory states",
                &[t, states.last_dim()],
                states.shape(),
            ));
        }
        if actions.shape().len() != 2 || actions.shape()[0] != t {
            return Err(DmmError::shape(
                "Trajectory actions",
                &[t, actions.last_dim()],
                actions.shape(),
            ));
        }
        let rtg = compute_rtg(&rewards)?;
        Ok(Self {
            states,
            actions,
            rewards,
            rtg,
        })
    }

    pub fn from_rows(states: &[Vec<f64>], actions: &[Vec<f64>], rewards: &[f64]) -> Result<Self> {
        if rewards.is_empty() {
            return Err(DmmError::Format("empty trajectory".into()));
        }
        Self::new(
            rows_to_tensor(states, "states")?,
            rows_to_tensor(actions, "actions")?,
            Tensor::new(&[rewards.len()], rewards.to_vec())?,
        )
    }

    pub fn len(&self) -> usize {
        self.rewards.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.last_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.last_dim()
    }

    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn actions(&self) -> &Tensor {
        &self.actions
    }

    pub fn rewards(&self) -> &Tensor {
        &self.rewards
    }

    pub fn rtg(&self) -> &Tensor {
        &self.rtg
    }

    pub fn state(&self, t: usize) -> &[f64] {
        let s = self.state_dim();
        &self.states.data()[t * s..(t + 1) * s]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        let a = self.action_dim();
        &self.actions.data()[t * a..(t + 1) * a]
    }

    pub fn total_return(&self) -> f64 {
        self.rtg.data()[0]
    }
}

/// A set of trajectories with common state and action widths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(first) = trajectories.first() {
            let (s, a) = (first.state_dim(), first.action_dim());
            if trajectories.iter().any(|t| t.state_dim() != s || t.action_dim() != a) {
                return Err(DmmError::Format(
                    "trajectories disagree on state or action width".into(),
                ));
            }
        }
        Ok(Self { trajectories })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.trajectories.first().map(Trajectory::state_dim)
    }

    pub fn action_dim(&self) -> Option<usize> {
        self.trajectories.first().map(Trajectory::action_dim)
    }

    pub fn max_return(&self) -> Option<f64> {
        self.trajectories.iter().map(Trajectory::total_return).reduce(f64::max)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for t in &self.trajectories {
            let rec = Record {
                states: tensor_to_rows(&t.states),
                actions: tensor_to_rows(&t.actions),
                rewards: t.rewards.data().to_vec(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl Read) -> Result<Self> {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| DmmError::Format(format!("trajectory line {}: {e}", i + 1)))?;
            out.push(
                Trajectory::from_rows(&rec.states, &rec.actions, &rec.rewards)
                    .map_err(|e| DmmError::Format(format!("trajectory line {}: {e}", i + 1)))?,
            );
        }
        Self::new(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(File::open(path)?)
    }
}

/// Per-dimension state statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, sd))| (x - m) / sd.max(STD_FLOOR))
            .collect()
    }

    pub fn untransform(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, sd))| x * sd.max(STD_FLOOR) + m)
            .collect()
    }
}

/// Mean and (population) standard deviation of every state dimension.
pub fn normalize_states(ds: &Dataset) -> Result<NormStats> {
    let n = ds.total_steps();
    let Some(dim) = ds.state_dim() else {
        return Err(DmmError::invalid("normalize_states", "empty dataset"));
    };
    if n < 2 {
        return Err(DmmError::invalid("normalize_states", "need at least two steps"));
    }
    let mut mean = vec![0.0; dim];
    for t in ds.trajectories() {
        for row in t.states.data().chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for t in ds.trajectories() {
        for row in t.states.data().chunks(dim) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
    Ok(NormStats { mean, std })
}

/// One front-padded `K`-step window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// `[K, 1]`.
    pub rtg: Tensor,
    /// `[K, state_dim]`.
    pub states: Tensor,
    /// `[K, action_dim]`, also the targets.
    pub actions: Tensor,
    /// `[K]`, one on real steps.
    pub mask: Tensor,
}

/// The `k` steps ending at `end_t`, zero-padded in front when the trajectory is shorter.
pub fn sample_subsequence(traj: &Trajectory, end_t: usize, k: usize) -> Result<TrainingSample> {
    sample_window(traj, end_t, k, None)
}

fn sample_window(traj: &Trajectory, end_t: usize, k: usize, norm: Option<&NormStats>) -> Result<TrainingSample> {
    if end_t >= traj.len() {
        return Err(DmmError::invalid(
            "sample_subsequence",
            format!("end_t {end_t} outside trajectory of length {}", traj.len()),
        ));
    }
    if k == 0 {
        return Err(DmmError::invalid("sample_subsequence", "K must be at least 1"));
    }
    let (sd, ad) = (traj.state_dim(), traj.action_dim());
    let real = (end_t + 1).min(k);
    let start = end_t + 1 - real;
    let pad = k - real;
    let mut rtg = vec![0.0; k];
    let mut states = vec![0.0; k * sd];
    let mut actions = vec![0.0; k * ad];
    let mut mask = vec![0.0; k];
    for i in 0..real {
        let (slot, t) = (pad + i, start + i);
        rtg[slot] = traj.rtg.data()[t];
        let s = match norm {
            Some(n) => n.transform(traj.state(t)),
            None => traj.state(t).to_vec(),
        };
        states[slot * sd..(slot + 1) * sd].copy_from_slice(&s);
        actions[slot * ad..(slot + 1) * ad].copy_from_slice(traj.action(t));
        mask[slot] = 1.0;
    }
    Ok(TrainingSample {
        rtg: Tensor::new(&[k, 1], rtg)?,
        states: Tensor::new(&[k, sd], states)?,
        actions: Tensor::new(&[k, ad], actions)?,
        mask: Tensor::new(&[k], mask)?,
    })
}

/// Stacked samples ready for the model and the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: ModelInput,
    /// `[B, K, action_dim]`.
    pub targets: Tensor,
    /// `[B, K]`.
    pub mask: Tensor,
}

impl Batch {
    pub fn stack(samples: &[TrainingSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(DmmError::invalid("Batch::stack", "no samples"));
        };
        let b = samples.len();
        let k = first.mask.numel();
        let (sd, ad) = (first.states.last_dim(), first.actions.last_dim());
        let cat = |f: fn(&TrainingSample) -> &Tensor| -> Vec<f64> {
            samples.iter().flat_map(|s| f(s).data().iter().copied()).collect()
        };
        let actions = Tensor::new(&[b, k, ad], cat(|s| &s.actions))?;
        Ok(Self {
            input: ModelInput {
                rtg: Tensor::new(&[b, k, 1], cat(|s| &s.rtg))?,
                states: Tensor::new(&[b, k, sd], cat(|s| &s.states))?,
                actions: actions.clone(),
            },
            targets: actions,
            mask: Tensor::new(&[b, k], cat(|s| &s.mask))?,
        })
    }
}

/// Draws windows uniformly over all `(trajectory, end_t)` pairs.
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    norm: Option<&'a NormStats>,
    index: Vec<(usize, usize)>,
    k: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, norm: Option<&'a NormStats>, k: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(DmmError::invalid("BatchSampler", "empty dataset"));
        }
        if let (Some(n), Some(sd)) = (norm, dataset.state_dim()) {
            if n.dim() != sd {
                return Err(DmmError::shape("BatchSampler", &[sd], &[n.dim()]));
            }
        }
        let index = dataset
            .trajectories()
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
            .collect();
        Ok(Self {
            dataset,
            norm,
            index,
            k,
        })
    }

    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
        let samples = (0..batch_size)
            .map(|_| {
                let (ti, end_t) = self.index[rng.gen_range(0..self.index.len())];
                sample_window(&self.dataset.trajectories()[ti], end_t, self.k, self.norm)
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::stack(&samples)
    }
}
