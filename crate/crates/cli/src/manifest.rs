use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn version_stamp() -> String {
    format!("turnlab {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output file names, relative to the manifest.
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Collects inputs and outputs of one run and writes the manifest into the
/// output directory.
pub struct Run {
    pub out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(out: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { out, inputs: BTreeMap::new(), outputs: Vec::new() })
    }

    pub fn input(&mut self, path: &Path) -> Result<PathBuf> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(path.to_path_buf())
    }

    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.output(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(self, command: &str, config: serde_json::Value, seed: u64) -> Result<RunManifest> {
        let m = RunManifest { command: command.into(), config, seed, version: version_stamp(), inputs: self.inputs, outputs: self.outputs };
        let path = self.out.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(m)
    }
}
