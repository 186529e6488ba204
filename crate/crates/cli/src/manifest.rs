use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Sidecar written next to every results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 over the config snapshot, the seed and every input file.
    pub input_hash: String,
    pub timings_s: BTreeMap<String, f64>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, seed: u64, inputs: &[PathBuf]) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config)?);
        h.update(seed.to_le_bytes());
        for p in inputs {
            let bytes = std::fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(Self {
            command: command.to_owned(),
            config: config.clone(),
            seed,
            inputs: inputs.to_vec(),
            outputs: Vec::new(),
            input_hash: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
            timings_s: BTreeMap::new(),
            summary: BTreeMap::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `results.csv` → `results.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}
