//! Run manifests: the config snapshot, the seed and a hash of every artifact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `config.txt` and `manifest-<command>.txt` into `cfg.out`.
///
/// Artifacts are paths relative to `cfg.out`.
pub fn write_manifest(cfg: &RunConfig, command: &str, artifacts: &[&str]) -> Result<()> {
    let snapshot = cfg.to_text();
    fs::write(cfg.out.join("config.txt"), &snapshot)?;
    let mut m = String::from("dmm-manifest v1\n");
    writeln!(m, "command {command}")?;
    writeln!(m, "seed {}", cfg.seed)?;
    writeln!(m, "config config.txt sha256 {}", sha256_hex(snapshot.as_bytes()))?;
    for name in artifacts {
        writeln!(m, "artifact {name} sha256 {}", file_sha256(&cfg.out.join(name))?)?;
    }
    let path = cfg.out.join(format!("manifest-{command}.txt"));
    fs::write(&path, m).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
