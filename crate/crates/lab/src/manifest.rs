//! Experiment manifests, written before a command computes anything.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::LabConfig;
use crate::error::{LabError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Version of the dump and checkpoint formats this tool reads and writes.
pub const FORMAT_VERSION: u32 = crate::checkpoint::VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub format_version: u32,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Input artifacts and their SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub out: PathBuf,
    pub text_vocab: usize,
    pub image_vocab: usize,
}

impl Manifest {
    pub fn new(command: &str, cfg: &LabConfig, out: &Path) -> Self {
        let dims = read_core::models::ModelDims::default();
        Self {
            command: command.into(),
            tool_version: TOOL_VERSION.into(),
            format_version: FORMAT_VERSION,
            seed: cfg.train.seed,
            config: cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            inputs: BTreeMap::new(),
            out: out.to_path_buf(),
            text_vocab: dims.text_vocab,
            image_vocab: dims.image_vocab,
        }
    }

    /// Records the hash of an input file under `label`.
    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(label.into(), format!("{}:{h}", path.display()));
        Ok(())
    }

    /// Rebuilds the resolved config recorded in the manifest.
    pub fn lab_config(&self) -> Result<LabConfig> {
        let mut cfg = LabConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| LabError::format(&path, e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| LabError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| LabError::format(&path, e.to_string()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| LabError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}
