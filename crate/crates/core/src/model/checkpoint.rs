//! Self-describing checkpoint files.
//!
//! ```text
//! dmm-checkpoint v1
//! meta <key> <value>
//! tensor <name> <f32|f64> <d0>x<d1>... <byte offset>
//! end
//! <little-endian payload>
//! ```
//!
//! Offsets count from the first payload byte. Meta values never contain
//! whitespace; normalization vectors are comma-joined.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::KEYS;
use super::{DecisionModel, ModelConfig, ParamStore};
use crate::data::NormStats;
use crate::error::{DmmError, Result};
use crate::numkernel::Tensor;

const MAGIC: &str = "dmm-checkpoint v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Precision {
    type Err = DmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(DmmError::invalid("precision", format!("unknown precision {other:?}"))),
        }
    }
}

impl Precision {
    fn tag(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub norm: Option<NormStats>,
    /// Free-form entries such as the training step.
    pub extra: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn from_model(model: &DecisionModel, norm: Option<NormStats>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            norm,
            extra: Vec::new(),
        }
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn to_model(&self) -> Result<DecisionModel> {
        let mut model = DecisionModel::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        model.params_mut().load_from(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self, precision: Precision) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in self.config.to_pairs() {
            header.push_str(&format!("meta model.{k} {v}\n"));
        }
        if let Some(n) = &self.norm {
            header.push_str(&format!("meta norm.mean {}\n", join(&n.mean)));
            header.push_str(&format!("meta norm.std {}\n", join(&n.std)));
        }
        for (k, v) in &self.extra {
            if k.contains(char::is_whitespace) || v.contains(char::is_whitespace) || v.is_empty() {
                return Err(DmmError::Format(format!(
                    "meta entry {k:?} must be a single non-empty token"
                )));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!(
                "tensor {name} {} {} {}\n",
                precision.tag(),
                dims.join("x"),
                payload.len()
            ));
            for &v in t.data() {
                match precision {
                    Precision::F32 => {
                        let f = v as f32;
                        if !f.is_finite() {
                            return Err(DmmError::NonFinite { op: "checkpoint" });
                        }
                        payload.extend_from_slice(&f.to_le_bytes());
                    }
                    Precision::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| DmmError::Format(format!("checkpoint: {msg}"));
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(bad("header is not terminated by `end`".into()));
            };
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let payload = &bytes[pos..];
        if lines.first() != Some(&MAGIC) {
            return Err(bad("missing magic line".into()));
        }
        let mut config = ModelConfig::default();
        let mut seen = Vec::new();
        let (mut mean, mut std) = (None, None);
        let mut extra = Vec::new();
        let mut params = ParamStore::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["meta", key, value] => {
                    if let Some(k) = key.strip_prefix("model.") {
                        if !config.set(k, value)? {
                            return Err(bad(format!("line {}: unknown model key {k}", i + 1)));
                        }
                        seen.push(k.to_string());
                    } else if *key == "norm.mean" {
                        mean = Some(split(value)?);
                    } else if *key == "norm.std" {
                        std = Some(split(value)?);
                    } else {
                        extra.push((key.to_string(), value.to_string()));
                    }
                }
                ["tensor", name, dtype, dims, offset] => {
                    let precision = match *dtype {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        other => return Err(bad(format!("line {}: unsupported dtype {other}", i + 1))),
                    };
                    let shape = dims
                        .split('x')
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|_| bad(format!("line {}: bad shape {dims}", i + 1)))?;
                    let offset: usize = offset.parse().map_err(|_| bad(format!("line {}: bad offset", i + 1)))?;
                    let numel: usize = shape.iter().product();
                    let end = offset + numel * precision.width();
                    if end > payload.len() {
                        return Err(bad(format!("tensor {name} runs past the payload")));
                    }
                    let raw = &payload[offset..end];
                    let data: Vec<f64> = match precision {
                        Precision::F32 => raw
                            .chunks_exact(4)
                            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                            .collect(),
                        Precision::F64 => raw
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    };
                    params.add(*name, Tensor::new(&shape, data)?);
                }
                _ => return Err(bad(format!("line {}: cannot parse {line:?}", i + 1))),
            }
        }
        if let Some(missing) = KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(bad(format!("missing model key {missing}")));
        }
        config.validate()?;
        let norm = match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(bad("incomplete normalization statistics".into())),
        };
        Ok(Self {
            config,
            params,
            norm,
            extra,
        })
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.parse()
                .map_err(|_| DmmError::Format(format!("checkpoint: bad number {x:?}")))
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint, precision: Precision) -> Result<()> {
    fs::write(path, ck.to_bytes(precision)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn model() -> DecisionModel {
        let cfg = ModelConfig {
            n_layers: 1,
            d: 4,
            n_state: 2,
            state_dim: 3,
            action_dim: 2,
            variant: Variant::Double,
            ..ModelConfig::default()
        };
        DecisionModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let m = model();
        let norm = NormStats {
            mean: vec![0.1, -2.5, 1.0 / 3.0],
            std: vec![1.0, 0.0, 7.25],
        };
        let mut ck = Checkpoint::from_model(&m, Some(norm));
        ck.extra.push(("step".into(), "17".into()));
        let bytes = ck.to_bytes(Precision::F32).unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(Precision::F32).unwrap(), bytes);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.norm, ck.norm);
        assert_eq!(back.extra, ck.extra);
        for ((n1, a), (n2, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            let rounded: Vec<f64> = a.data().iter().map(|&v| f64::from(v as f32)).collect();
            assert_eq!(b.data(), rounded.as_slice());
        }
    }

    #[test]
    fn f64_round_trip_restores_model() {
        let m = model();
        let ck = Checkpoint::from_model(&m, None);
        let back = Checkpoint::from_bytes(&ck.to_bytes(Precision::F64).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap().params(), m.params());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_model(&model(), None).to_bytes(Precision::F32).unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense\nend\n").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("meta model.d 4\n", "");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }
}
