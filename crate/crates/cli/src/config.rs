//! Flat `key = value` run configuration with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, unknown or repeated keys are rejected with their line number.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use dmm_core::env::{ChainDatasetSpec, DenseChainEnv, Environment, GridStitchEnv, StitchDatasetSpec};
use dmm_core::model::{ModelConfig, Precision};
use dmm_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Grid,
    Chain,
}

impl FromStr for EnvKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Self::Grid),
            "chain" => Ok(Self::Chain),
            other => bail!("unknown env {other:?} (expected grid or chain)"),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Grid => "grid",
            Self::Chain => "chain",
        })
    }
}

impl EnvKind {
    pub fn make(self) -> Box<dyn Environment> {
        match self {
            Self::Grid => Box::new(GridStitchEnv::default()),
            Self::Chain => Box::new(DenseChainEnv::default()),
        }
    }
}

/// Target return for rollouts: a number, or `auto` for the environment default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RtgTarget {
    Auto,
    Fixed(f64),
}

impl FromStr for RtgTarget {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        let v: f64 = s.parse().map_err(|_| anyhow!("expected a number or auto, got {s:?}"))?;
        if !v.is_finite() {
            bail!("initial rtg must be finite");
        }
        Ok(Self::Fixed(v))
    }
}

impl std::fmt::Display for RtgTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(v) => write!(f, "{v:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Existing JSON-lines dataset; empty means generate from `env`.
    pub path: Option<PathBuf>,
    pub n_per_family: usize,
    pub grid_noise: f64,
    pub n_trajectories: usize,
    pub chain_noise: f64,
    pub normalize_states: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let grid = StitchDatasetSpec::default();
        let chain = ChainDatasetSpec::default();
        Self {
            path: None,
            n_per_family: grid.n_per_family,
            grid_noise: grid.noise,
            n_trajectories: chain.n_trajectories,
            chain_noise: chain.noise,
            normalize_states: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub initial_rtg: RtgTarget,
    pub random_episodes: usize,
    pub trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            initial_rtg: RtgTarget::Auto,
            random_episodes: 1000,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub lanes: usize,
    pub repeats: usize,
    pub d_inner: usize,
    pub n_state: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![64, 256, 1024, 4096],
            lanes: 1,
            repeats: 3,
            d_inner: 16,
            n_state: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub env: EnvKind,
    pub data: DataConfig,
    /// `state_dim`, `action_dim` and `discrete_actions` follow `env`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: u64,
    pub precision: Precision,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            env: EnvKind::Grid,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            precision: Precision::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        };
        cfg.sync_env();
        cfg
    }
}

const DERIVED_MODEL_KEYS: [&str; 3] = ["state_dim", "action_dim", "discrete_actions"];

const TRAIN_KEYS: [&str; 12] = [
    "batch_size",
    "total_updates",
    "lr",
    "warmup_steps",
    "grad_clip",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "log_every",
    "checkpoint_every",
    "precision",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("cannot parse {key} = {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("{key} must be true or false, got {value:?}"),
    }
}

impl RunConfig {
    /// Copies the environment's observation and action layout into the model.
    pub fn sync_env(&mut self) {
        let env = self.env.make();
        self.model.state_dim = env.state_dim();
        self.model.action_dim = env.action_dim();
        self.model.discrete_actions = env.discrete();
    }

    pub fn keys(&self) -> Vec<String> {
        let mut keys = vec!["seed".to_string(), "out".into(), "env".into()];
        keys.extend(
            [
                "path",
                "n_per_family",
                "grid_noise",
                "n_trajectories",
                "chain_noise",
                "normalize_states",
            ]
            .map(|k| format!("data.{k}")),
        );
        keys.extend(
            self.model
                .to_pairs()
                .into_iter()
                .filter(|(k, _)| !DERIVED_MODEL_KEYS.contains(k))
                .map(|(k, _)| format!("model.{k}")),
        );
        keys.extend(TRAIN_KEYS.map(|k| format!("train.{k}")));
        keys.extend(["episodes", "initial_rtg", "random_episodes", "trace"].map(|k| format!("eval.{k}")));
        keys.extend(["lengths", "lanes", "repeats", "d_inner", "n_state"].map(|k| format!("bench.{k}")));
        keys
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (section, name) = key.split_once('.').unwrap_or(("", key));
        let t = &self.train;
        Some(match (section, name) {
            ("", "seed") => self.seed.to_string(),
            ("", "out") => self.out.display().to_string(),
            ("", "env") => self.env.to_string(),
            ("data", "path") => self
                .data
                .path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            ("data", "n_per_family") => self.data.n_per_family.to_string(),
            ("data", "grid_noise") => format!("{:?}", self.data.grid_noise),
            ("data", "n_trajectories") => self.data.n_trajectories.to_string(),
            ("data", "chain_noise") => format!("{:?}", self.data.chain_noise),
            ("data", "normalize_states") => self.data.normalize_states.to_string(),
            ("model", k) if !DERIVED_MODEL_KEYS.contains(&k) => self.model.get(k)?,
            ("train", "batch_size") => t.batch_size.to_string(),
            ("train", "total_updates") => t.total_updates.to_string(),
            ("train", "lr") => format!("{:?}", t.lr),
            ("train", "warmup_steps") => t.warmup_steps.to_string(),
            ("train", "grad_clip") => format!("{:?}", t.grad_clip),
            ("train", "weight_decay") => format!("{:?}", t.weight_decay),
            ("train", "beta1") => format!("{:?}", t.beta1),
            ("train", "beta2") => format!("{:?}", t.beta2),
            ("train", "adam_eps") => format!("{:?}", t.adam_eps),
            ("train", "log_every") => t.log_every.to_string(),
            ("train", "checkpoint_every") => self.checkpoint_every.to_string(),
            ("train", "precision") => self.precision.to_string(),
            ("eval", "episodes") => self.eval.episodes.to_string(),
            ("eval", "initial_rtg") => self.eval.initial_rtg.to_string(),
            ("eval", "random_episodes") => self.eval.random_episodes.to_string(),
            ("eval", "trace") => self.eval.trace.to_string(),
            ("bench", "lengths") => {
                let v: Vec<String> = self.bench.lengths.iter().map(|l| l.to_string()).collect();
                v.join(",")
            }
            ("bench", "lanes") => self.bench.lanes.to_string(),
            ("bench", "repeats") => self.bench.repeats.to_string(),
            ("bench", "d_inner") => self.bench.d_inner.to_string(),
            ("bench", "n_state") => self.bench.n_state.to_string(),
            _ => return None,
        })
    }

    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, name) = key.split_once('.').unwrap_or(("", key));
        let t = &mut self.train;
        match (section, name) {
            ("", "seed") => self.seed = parse(key, value)?,
            ("", "out") => self.out = PathBuf::from(value),
            ("", "env") => {
                self.env = value.parse()?;
                self.sync_env();
            }
            ("data", "path") => self.data.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            ("data", "n_per_family") => self.data.n_per_family = parse(key, value)?,
            ("data", "grid_noise") => self.data.grid_noise = parse(key, value)?,
            ("data", "n_trajectories") => self.data.n_trajectories = parse(key, value)?,
            ("data", "chain_noise") => self.data.chain_noise = parse(key, value)?,
            ("data", "normalize_states") => self.data.normalize_states = parse_bool(key, value)?,
            ("model", k) if !DERIVED_MODEL_KEYS.contains(&k) => {
                if !self.model.set(k, value)? {
                    bail!("unknown key {key}");
                }
            }
            ("train", "batch_size") => t.batch_size = parse(key, value)?,
            ("train", "total_updates") => t.total_updates = parse(key, value)?,
            ("train", "lr") => t.lr = parse(key, value)?,
            ("train", "warmup_steps") => t.warmup_steps = parse(key, value)?,
            ("train", "grad_clip") => t.grad_clip = parse(key, value)?,
            ("train", "weight_decay") => t.weight_decay = parse(key, value)?,
            ("train", "beta1") => t.beta1 = parse(key, value)?,
            ("train", "beta2") => t.beta2 = parse(key, value)?,
            ("train", "adam_eps") => t.adam_eps = parse(key, value)?,
            ("train", "log_every") => t.log_every = parse(key, value)?,
            ("train", "checkpoint_every") => self.checkpoint_every = parse(key, value)?,
            ("train", "precision") => self.precision = value.parse()?,
            ("eval", "episodes") => self.eval.episodes = parse(key, value)?,
            ("eval", "initial_rtg") => self.eval.initial_rtg = value.parse()?,
            ("eval", "random_episodes") => self.eval.random_episodes = parse(key, value)?,
            ("eval", "trace") => self.eval.trace = parse_bool(key, value)?,
            ("bench", "lengths") => {
                self.bench.lengths = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
            }
            ("bench", "lanes") => self.bench.lanes = parse(key, value)?,
            ("bench", "repeats") => self.bench.repeats = parse(key, value)?,
            ("bench", "d_inner") => self.bench.d_inner = parse(key, value)?,
            ("bench", "n_state") => self.bench.n_state = parse(key, value)?,
            _ => bail!("unknown key {key}"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        // env first, so that model layout follows it regardless of line order
        let lines: Vec<(usize, &str, &str)> = text
            .lines()
            .enumerate()
            .filter_map(|(i, raw)| {
                let line = raw.trim();
                (!line.is_empty() && !line.starts_with('#')).then_some((i + 1, line))
            })
            .map(|(no, line)| {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("line {no}: expected `key = value`, got {line:?}"))?;
                Ok((no, k.trim(), v.trim()))
            })
            .collect::<Result<_>>()?;
        for &(no, key, _) in &lines {
            if !seen.insert(key) {
                bail!("line {no}: duplicate key {key}");
            }
        }
        let (env_lines, rest): (Vec<_>, Vec<_>) = lines.into_iter().partition(|(_, k, _)| *k == "env");
        for (no, key, value) in env_lines.into_iter().chain(rest) {
            cfg.set(key, value).with_context(|| format!("line {no}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in self.keys() {
            let _ = writeln!(s, "{key} = {}", self.get(&key).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| anyhow!("{e}"))?;
        self.train.validate().map_err(|e| anyhow!("{e}"))?;
        if self.eval.episodes == 0 || self.eval.random_episodes == 0 {
            bail!("eval.episodes and eval.random_episodes must be positive");
        }
        if self.bench.lengths.is_empty() || self.bench.lanes == 0 || self.bench.repeats == 0 {
            bail!("bench.lengths, bench.lanes and bench.repeats must be non-empty and positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "# comment\nenv = chain\nseed = 7\nmodel.variant = double\nmodel.mixer = mm_linear\n\
                    train.lr = 0.0003\neval.initial_rtg = 12.5\nbench.lengths = 8, 16\ndata.path = d.jsonl\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.state_dim, 1);
        assert!(!cfg.model.discrete_actions);
        assert_eq!(cfg.bench.lengths, vec![8, 16]);
        assert_eq!(cfg.eval.initial_rtg, RtgTarget::Fixed(12.5));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn env_sets_layout_whatever_the_line_order() {
        let cfg = RunConfig::parse("model.d = 32\nenv = grid\n").unwrap();
        assert_eq!((cfg.model.state_dim, cfg.model.action_dim), (2, 4));
        assert!(cfg.model.discrete_actions);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("seed = 1\n\nmodel.colour = red\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 3"), "{err:#}");
        let err = RunConfig::parse("train.lr = fast\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 1"));
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("model.state_dim = 3\n").is_err());
        assert!(RunConfig::parse("just words\n").is_err());
        assert!(RunConfig::parse("train.grad_clip = 0\n").is_err());
    }
}
