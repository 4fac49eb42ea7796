//! Flat `key = value` experiment configuration.
//!
//! Keys are the [`TrainConfig`] field names plus a few world and
//! orchestration settings. Later sources override earlier ones:
//! defaults, then the config file, then command-line flags.

use std::collections::BTreeSet;
use std::path::Path;

use read_core::models::PretrainConfig;
use read_core::train::{TrainConfig, CONFIG_KEYS};

use crate::error::{LabError, Result};

pub const LAB_KEYS: [&str; 4] = ["train_scenes", "held_out_scenes", "pretrain_epochs", "ablation_seeds"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub train: TrainConfig,
    pub train_scenes: usize,
    pub held_out_scenes: usize,
    pub pretrain_epochs: usize,
    /// Seeds per ablation row, counted up from `train.seed`.
    pub ablation_seeds: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            train_scenes: 2000,
            held_out_scenes: 500,
            pretrain_epochs: PretrainConfig::default().epochs,
            ablation_seeds: 3,
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .trim()
        .parse()
        .map_err(|_| LabError::Config(format!("bad value for {key}: {value:?}")))
}

impl LabConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_scenes" => self.train_scenes = parse_usize(key, value)?,
            "held_out_scenes" => self.held_out_scenes = parse_usize(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_usize(key, value)?,
            "ablation_seeds" => self.ablation_seeds = parse_usize(key, value)?,
            _ => self
                .train
                .set(key, value)
                .map_err(|e| LabError::Config(e.to_string()))?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| LabError::Config(e.to_string()))?;
        if self.train_scenes < self.train.batch_size {
            return Err(LabError::Config(format!(
                "train_scenes {} is smaller than batch_size {}",
                self.train_scenes, self.train.batch_size
            )));
        }
        if self.held_out_scenes == 0 || self.pretrain_epochs == 0 || self.ablation_seeds == 0 {
            return Err(LabError::Config(
                "held_out_scenes, pretrain_epochs and ablation_seeds must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Resolved values in a fixed key order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.train.to_pairs();
        out.push(("train_scenes", self.train_scenes.to_string()));
        out.push(("held_out_scenes", self.held_out_scenes.to_string()));
        out.push(("pretrain_epochs", self.pretrain_epochs.to_string()));
        out.push(("ablation_seeds", self.ablation_seeds.to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !CONFIG_KEYS.contains(&k) && !LAB_KEYS.contains(&k) {
                return Err(LabError::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(LabError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            seed: self.train.seed,
            ..PretrainConfig::default()
        }
    }
}
