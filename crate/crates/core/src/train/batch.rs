use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use super::config::{AlignSource, ReconTarget, TrainConfig};
use crate::error::{invalid, Result};
use crate::world::vocab::JITTER_COUNT;
use crate::world::{
    render_image, Dataset, ImageRendering, Scene, TokenId,
};

/// One training batch; every per-sample vector has length `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub scene_ids: Vec<u64>,
    pub images: Vec<ImageRendering>,
    pub captions: Vec<Vec<TokenId>>,
    /// `M` hard negatives per caption.
    pub negatives: Vec<Vec<Vec<TokenId>>>,
    /// `K` reconstruction targets per caption.
    pub targets: Vec<Vec<Vec<TokenId>>>,
    pub paraphrases: Vec<Vec<TokenId>>,
}

impl BatchSample {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// `n` draws from `pool`, without replacement as long as the pool lasts.
fn draw<'a, T, R: Rng>(pool: &[&'a T], n: usize, rng: &mut R) -> Vec<&'a T> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let take = (n - out.len()).min(pool.len());
        out.extend(sample(rng, pool.len(), take).into_iter().map(|i| pool[i]));
    }
    out
}

/// Samples `batch_size` distinct scenes and assembles their batch.
pub fn sample_batch<R: Rng>(dataset: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<BatchSample> {
    if dataset.len() < cfg.batch_size {
        return Err(invalid(format!(
            "dataset has {} scenes, fewer than batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let idx = sample(rng, dataset.len(), cfg.batch_size).into_vec();
    assemble_batch(dataset, cfg, &idx, rng)
}

/// Builds the batch of the given dataset entries.
///
/// Draws happen in the same order whatever the loss weights, so runs that
/// differ only in `alpha` or `beta` see the same batches.
pub fn assemble_batch<R: Rng>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    indices: &[usize],
    rng: &mut R,
) -> Result<BatchSample> {
    let b = indices.len();
    let mut out = BatchSample {
        scene_ids: Vec::with_capacity(b),
        images: Vec::with_capacity(b),
        captions: Vec::with_capacity(b),
        negatives: Vec::with_capacity(b),
        targets: Vec::with_capacity(b),
        paraphrases: Vec::with_capacity(b),
    };
    for &i in indices {
        let e = dataset
            .entries
            .get(i)
            .ok_or_else(|| invalid(format!("scene index {i} out of range")))?;
        if e.captions.is_empty() {
            return Err(invalid(format!("scene {} has no captions", e.scene.id)));
        }
        let c = rng.gen_range(0..e.captions.len());
        let caption = &e.captions[c].tokens;
        let image = render_image(&e.scene, rng.gen_range(0..JITTER_COUNT as u8))?;

        let pool: Vec<&Vec<TokenId>> = e.negatives[c].iter().map(|r| &r.tokens).collect();
        if pool.is_empty() && cfg.m_negatives > 0 {
            return Err(invalid(format!("scene {} has no hard negatives", e.scene.id)));
        }
        let negatives: Vec<Vec<TokenId>> = draw(&pool, cfg.m_negatives, rng).into_iter().cloned().collect();

        let others: Vec<&Vec<TokenId>> = e
            .captions
            .iter()
            .map(|r| &r.tokens)
            .filter(|t| *t != caption)
            .collect();
        let alternatives = if others.is_empty() {
            return Err(invalid(format!("scene {} has a single distinct caption", e.scene.id)));
        } else {
            draw(&others, cfg.k_targets, rng)
        };
        let targets = match cfg.recon_target {
            ReconTarget::Alternative => alternatives.into_iter().cloned().collect(),
            ReconTarget::Original => alloc::vec![caption.clone(); cfg.k_targets],
        };

        let paraphrase = match cfg.align_source {
            AlignSource::RuleParaphrase => e.paraphrases[c]
                .choose(rng)
                .ok_or_else(|| invalid(format!("scene {} has no paraphrases", e.scene.id)))?
                .tokens
                .clone(),
            AlignSource::CaptionSetUnion => {
                let union: Vec<&Vec<TokenId>> = others
                    .iter()
                    .copied()
                    .chain(e.paraphrases.iter().flatten().map(|r| &r.tokens))
                    .filter(|t| *t != caption)
                    .collect();
                (*union.choose(rng).expect("others is non-empty")).clone()
            }
        };

        out.scene_ids.push(e.scene.id);
        out.images.push(image);
        out.captions.push(caption.clone());
        out.negatives.push(negatives);
        out.targets.push(targets);
        out.paraphrases.push(paraphrase);
    }
    Ok(out)
}

/// Builds the training dataset and applies paraphrase noise.
pub fn prepare_dataset(scenes: &[Scene], num_paraphrases: usize, noise_fraction: f64, seed: u64) -> Result<Dataset> {
    let mut d = Dataset::build(scenes, num_paraphrases, seed)?;
    if noise_fraction > 0.0 {
        d.apply_paraphrase_noise(noise_fraction, seed)?;
    }
    Ok(d)
}

