use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::losses::LossWeights;

/// What the decoder is asked to reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReconTarget {
    /// Other captions of the same scene, never the input caption itself.
    Alternative,
    /// The input caption.
    Original,
}

impl ReconTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ReconTarget::Alternative => "alternative",
            ReconTarget::Original => "original",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ReconTarget::Alternative, ReconTarget::Original]
            .into_iter()
            .find(|t| t.as_str() == s)
    }
}

/// Where the alignment partner of a caption comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignSource {
    /// One of the pregenerated paraphrases of the caption.
    RuleParaphrase,
    /// Any other caption of the scene or any of its paraphrases.
    CaptionSetUnion,
}

impl AlignSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignSource::RuleParaphrase => "rule-paraphrase",
            AlignSource::CaptionSetUnion => "caption-set-union",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [AlignSource::RuleParaphrase, AlignSource::CaptionSetUnion]
            .into_iter()
            .find(|t| t.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Hard negatives per caption.
    pub m_negatives: usize,
    /// Reconstruction targets per caption.
    pub k_targets: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub warmup: u64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub recon_target: ReconTarget,
    pub align_source: AlignSource,
    pub num_paraphrases: usize,
    pub noise_fraction: f64,
    pub shared_tau: bool,
    /// Also put each image's own hard negatives in its text-to-image row.
    pub symmetric_negatives: bool,
    /// Global gradient-norm bound.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            m_negatives: 3,
            k_targets: 1,
            alpha: 0.1,
            beta: 0.5,
            lr: 3e-3,
            warmup: 50,
            epochs: 30,
            weight_decay: 0.01,
            seed: 0,
            recon_target: ReconTarget::Alternative,
            align_source: AlignSource::RuleParaphrase,
            num_paraphrases: 1,
            noise_fraction: 0.0,
            shared_tau: true,
            symmetric_negatives: false,
            clip: 5.0,
        }
    }
}

/// Field names in serialization order.
pub const CONFIG_KEYS: [&str; 17] = [
    "batch_size",
    "m_negatives",
    "k_targets",
    "alpha",
    "beta",
    "lr",
    "warmup",
    "epochs",
    "weight_decay",
    "seed",
    "recon_target",
    "align_source",
    "num_paraphrases",
    "noise_fraction",
    "shared_tau",
    "symmetric_negatives",
    "clip",
];

fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| invalid(format!("bad value for {key}: {value:?}")))
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2"));
        }
        if self.k_targets == 0 || self.num_paraphrases == 0 || self.epochs == 0 {
            return Err(invalid("k_targets, num_paraphrases and epochs must be positive"));
        }
        LossWeights::new(self.alpha, self.beta)?;
        let nonneg = [self.lr, self.weight_decay];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("lr and weight_decay must be finite and non-negative"));
        }
        if !(self.clip > 0.0) {
            return Err(invalid("clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(invalid("noise_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`CONFIG_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.batch_size.to_string(),
            self.m_negatives.to_string(),
            self.k_targets.to_string(),
            format!("{:?}", self.alpha),
            format!("{:?}", self.beta),
            format!("{:?}", self.lr),
            self.warmup.to_string(),
            self.epochs.to_string(),
            format!("{:?}", self.weight_decay),
            self.seed.to_string(),
            self.recon_target.as_str().into(),
            self.align_source.as_str().into(),
            self.num_paraphrases.to_string(),
            format!("{:?}", self.noise_fraction),
            self.shared_tau.to_string(),
            self.symmetric_negatives.to_string(),
            format!("{:?}", self.clip),
        ];
        CONFIG_KEYS.into_iter().zip(values).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "m_negatives" => self.m_negatives = parse(key, value)?,
            "k_targets" => self.k_targets = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "recon_target" => {
                self.recon_target = ReconTarget::parse(value.trim())
                    .ok_or_else(|| invalid(format!("bad value for {key}: {value:?}")))?
            }
            "align_source" => {
                self.align_source = AlignSource::parse(value.trim())
                    .ok_or_else(|| invalid(format!("bad value for {key}: {value:?}")))?
            }
            "num_paraphrases" => self.num_paraphrases = parse(key, value)?,
            "noise_fraction" => self.noise_fraction = parse(key, value)?,
            "shared_tau" => self.shared_tau = parse(key, value)?,
            "symmetric_negatives" => self.symmetric_negatives = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            _ => return Err(Error::Invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// SHA-256 of the `key=value` lines.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }
}
