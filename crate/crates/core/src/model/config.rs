use std::fmt;
use std::str::FromStr;

use crate::error::{DmmError, Result};
use crate::mixer::{MixerConfig, MixerKind};
use crate::numkernel::Activation;
use crate::ssm::ScanMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    /// One token mixer in front of the input projection.
    #[default]
    Single,
    /// A second token mixer on the SSM path after the input projection.
    Double,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Double => "double",
        })
    }
}

impl FromStr for Variant {
    type Err = DmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "double" => Ok(Self::Double),
            other => Err(DmmError::invalid("Variant", format!("unknown variant {other:?}"))),
        }
    }
}

/// Architecture of a decision model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub n_state: usize,
    pub expand: usize,
    pub mixer: MixerKind,
    pub window: usize,
    pub variant: Variant,
    pub activation: Activation,
    pub dropout: f64,
    pub context_k: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Squash continuous actions into (-1, 1).
    pub action_tanh: bool,
    /// Treat the head output as logits over `action_dim` choices.
    pub discrete_actions: bool,
    /// Returns-to-go are divided by this before embedding.
    pub rtg_scale: f64,
    pub ln_eps: f64,
    pub scan: ScanMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            d: 64,
            n_state: 16,
            expand: 2,
            mixer: MixerKind::MmConv,
            window: 6,
            variant: Variant::Single,
            activation: Activation::Silu,
            dropout: 0.1,
            context_k: 8,
            state_dim: 1,
            action_dim: 1,
            action_tanh: true,
            discrete_actions: false,
            rtg_scale: 1.0,
            ln_eps: 1e-5,
            scan: ScanMode::default(),
        }
    }
}

pub(crate) const KEYS: [&str; 17] = [
    "n_layers",
    "d",
    "n_state",
    "expand",
    "mixer",
    "window",
    "variant",
    "activation",
    "dropout",
    "context_k",
    "state_dim",
    "action_dim",
    "action_tanh",
    "discrete_actions",
    "rtg_scale",
    "ln_eps",
    "scan",
];

impl ModelConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d
    }

    pub fn mixer_config(&self) -> MixerConfig {
        MixerConfig {
            kind: self.mixer,
            window: self.window,
            d: self.d,
        }
    }

    /// The second mixer of a Double block runs on the `d_inner`-wide SSM path.
    pub fn inner_mixer_config(&self) -> MixerConfig {
        MixerConfig {
            kind: self.mixer,
            window: self.window,
            d: self.d_inner(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d", self.d),
            ("n_state", self.n_state),
            ("expand", self.expand),
            ("window", self.window),
            ("context_k", self.context_k),
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(DmmError::invalid("ModelConfig", format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DmmError::invalid("ModelConfig", "dropout must lie in [0, 1)"));
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            return Err(DmmError::invalid("ModelConfig", "rtg_scale must be positive"));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return Err(DmmError::invalid("ModelConfig", "ln_eps must be positive"));
        }
        Ok(())
    }

    /// Value of `key` in its text form.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "n_layers" => self.n_layers.to_string(),
            "d" => self.d.to_string(),
            "n_state" => self.n_state.to_string(),
            "expand" => self.expand.to_string(),
            "mixer" => self.mixer.to_string(),
            "window" => self.window.to_string(),
            "variant" => self.variant.to_string(),
            "activation" => self.activation.to_string(),
            "dropout" => format!("{:?}", self.dropout),
            "context_k" => self.context_k.to_string(),
            "state_dim" => self.state_dim.to_string(),
            "action_dim" => self.action_dim.to_string(),
            "action_tanh" => self.action_tanh.to_string(),
            "discrete_actions" => self.discrete_actions.to_string(),
            "rtg_scale" => format!("{:?}", self.rtg_scale),
            "ln_eps" => format!("{:?}", self.ln_eps),
            "scan" => self.scan.to_string(),
            _ => return None,
        })
    }

    /// Sets `key` from text. Returns `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_layers" => self.n_layers = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "n_state" => self.n_state = parse(key, value)?,
            "expand" => self.expand = parse(key, value)?,
            "mixer" => self.mixer = value.parse()?,
            "window" => self.window = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "activation" => self.activation = value.parse()?,
            "dropout" => self.dropout = parse(key, value)?,
            "context_k" => self.context_k = parse(key, value)?,
            "state_dim" => self.state_dim = parse(key, value)?,
            "action_dim" => self.action_dim = parse(key, value)?,
            "action_tanh" => self.action_tanh = parse(key, value)?,
            "discrete_actions" => self.discrete_actions = parse(key, value)?,
            "rtg_scale" => self.rtg_scale = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "scan" => self.scan = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `(key, value)` pairs for every field.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("known key"))).collect()
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DmmError::invalid("config", format!("cannot parse {key} = {value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let cfg = ModelConfig {
            variant: Variant::Double,
            activation: Activation::Gelu,
            mixer: MixerKind::MmLinear,
            dropout: 0.05,
            scan: ScanMode::Parallel { lanes: 4 },
            ..ModelConfig::default()
        };
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("nope", "1").unwrap());
        assert!(back.set("d", "x").is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
