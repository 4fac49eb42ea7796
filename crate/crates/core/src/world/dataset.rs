use alloc::vec::Vec;

use super::caption::{
    available_categories, caption_set, make_hard_negatives, make_paraphrase, CaptionRecord,
};
use super::noise::inject_paraphrase_noise;
use super::rng::derive;
use super::scene::Scene;
use super::vocab::TokenId;
use crate::error::{invalid, Result};

/// Everything pre-generated for one training scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub scene: Scene,
    /// The caption set, all with role `Original`.
    pub captions: Vec<CaptionRecord>,
    /// Paraphrase candidates per caption.
    pub paraphrases: Vec<Vec<CaptionRecord>>,
    /// Hard negatives per caption, one for every applicable category.
    pub negatives: Vec<Vec<CaptionRecord>>,
}

/// Training scenes with their caption sets, paraphrases and negatives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub entries: Vec<SceneEntry>,
}

impl Dataset {
    /// Generates captions, `num_paraphrases` paraphrases per caption and
    /// the hard-negative pool for every scene.
    pub fn build(scenes: &[Scene], num_paraphrases: usize, seed: u64) -> Result<Self> {
        if num_paraphrases == 0 {
            return Err(invalid("num_paraphrases must be at least 1"));
        }
        let mut entries = Vec::with_capacity(scenes.len());
        for scene in scenes {
            let captions = caption_set(scene);
            let mut paraphrases = Vec::with_capacity(captions.len());
            let mut negatives = Vec::with_capacity(captions.len());
            for (c, cap) in captions.iter().enumerate() {
                let key = scene.id * 16 + c as u64;
                paraphrases.push(
                    (0..num_paraphrases)
                        .map(|p| make_paraphrase(cap, derive(seed, 0x7a7a + p as u64, key)))
                        .collect::<Result<Vec<_>>>()?,
                );
                let available = available_categories(cap, scene)?.len();
                negatives.push(make_hard_negatives(cap, scene, available, derive(seed, 0x4e4e, key))?);
            }
            entries.push(SceneEntry {
                scene: *scene,
                captions,
                paraphrases,
                negatives,
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces a fraction of all paraphrase candidates by unrelated captions.
    pub fn apply_paraphrase_noise(&mut self, fraction: f64, seed: u64) -> Result<()> {
        let mut flat: Vec<CaptionRecord> = Vec::new();
        for e in &self.entries {
            flat.extend(e.captions.iter().cloned());
            for p in &e.paraphrases {
                flat.extend(p.iter().cloned());
            }
        }
        let noisy = inject_paraphrase_noise(&flat, fraction, seed)?;
        let mut it = noisy.into_iter();
        for e in &mut self.entries {
            for c in &mut e.captions {
                *c = it.next().expect("record count preserved");
            }
            for p in &mut e.paraphrases {
                for r in p.iter_mut() {
                    *r = it.next().expect("record count preserved");
                }
            }
        }
        Ok(())
    }

    /// All faithful captions and paraphrases, for decoder pre-training.
    pub fn caption_corpus(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend(e.captions.iter().map(|c| c.tokens.clone()));
            for p in &e.paraphrases {
                out.extend(p.iter().map(|c| c.tokens.clone()));
            }
        }
        out
    }
}
