use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::caption::{
    caption_set, make_hard_negatives, make_negative_of, make_paraphrase, CaptionRecord, NegCategory,
};
use super::rng::{derive, seeded};
use super::scene::{render_image, ImageRendering, Scene};
use super::vocab::JITTER_COUNT;
use crate::error::{invalid, Result};

/// Negatives per item in the paraphrase suite.
pub const PARAPHRASE_SUITE_NEGATIVES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SuiteKind {
    Swap,
    Replace,
    Paraphrase,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 3] = [SuiteKind::Swap, SuiteKind::Replace, SuiteKind::Paraphrase];

    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::Swap => "swap",
            SuiteKind::Replace => "replace",
            SuiteKind::Paraphrase => "paraphrase",
        }
    }

    pub fn parse(s: &str) -> Option<SuiteKind> {
        SuiteKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    fn categories(self) -> &'static [NegCategory] {
        match self {
            SuiteKind::Swap => &[NegCategory::SwapObject, NegCategory::SwapAttribute],
            SuiteKind::Replace => &[
                NegCategory::ReplaceObject,
                NegCategory::ReplaceAttribute,
                NegCategory::ReplaceRelation,
            ],
            SuiteKind::Paraphrase => &NegCategory::ALL,
        }
    }
}

/// One evaluation instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkItem {
    pub item_id: u64,
    pub image: ImageRendering,
    pub positives: Vec<CaptionRecord>,
    pub negatives: Vec<CaptionRecord>,
    /// Negative category for single-positive suites; `None` for the
    /// paraphrase suite.
    pub category: Option<NegCategory>,
}

impl BenchmarkItem {
    pub fn category_label(&self) -> &'static str {
        self.category.map_or("paraphrase", NegCategory::as_str)
    }
}

pub fn build_benchmark(kind: SuiteKind, scenes: &[Scene], seed: u64) -> Result<Vec<BenchmarkItem>> {
    build_benchmark_with(kind, scenes, seed, PARAPHRASE_SUITE_NEGATIVES)
}

/// Builds a suite from held-out scenes.
///
/// Swap and replace suites pair the base caption with one negative of a
/// category drawn from the suite's categories; scenes no category of the
/// suite can falsify are skipped. The paraphrase suite pairs the base
/// caption and a paraphrase with `paraphrase_negatives` hard negatives.
pub fn build_benchmark_with(
    kind: SuiteKind,
    scenes: &[Scene],
    seed: u64,
    paraphrase_negatives: usize,
) -> Result<Vec<BenchmarkItem>> {
    if scenes.is_empty() {
        return Err(invalid("benchmark needs at least one scene"));
    }
    let tag = 0xbe00 + kind as u64;
    let mut items = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let mut rng = seeded(derive(seed, tag, i as u64), 1);
        let jitter = rng.gen_range(0..JITTER_COUNT as u8);
        let image = render_image(scene, jitter)?;
        let base = caption_set(scene).swap_remove(0);
        let item_seed = derive(seed, tag, i as u64);
        match kind {
            SuiteKind::Swap | SuiteKind::Replace => {
                let mut cats = kind.categories().to_vec();
                cats.shuffle(&mut rng);
                let negative = cats
                    .into_iter()
                    .find_map(|c| make_negative_of(&base, scene, c, item_seed).transpose())
                    .transpose()?;
                let Some(negative) = negative else { continue };
                items.push(BenchmarkItem {
                    item_id: items.len() as u64,
                    image,
                    category: negative.category,
                    positives: vec![base],
                    negatives: vec![negative],
                });
            }
            SuiteKind::Paraphrase => {
                let para = make_paraphrase(&base, item_seed)?;
                let negatives = make_hard_negatives(&base, scene, paraphrase_negatives, item_seed)?;
                items.push(BenchmarkItem {
                    item_id: items.len() as u64,
                    image,
                    positives: vec![base, para],
                    negatives,
                    category: None,
                });
            }
        }
    }
    Ok(items)
}
