//! Ranking metrics on benchmark suites.
//!
//! All decisions use strict inequalities: a tie between a positive and a
//! negative counts as a failure.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::tensor::canonical_sum;
use crate::world::{BenchmarkItem, TokenId};

/// Anything that maps captions and image renderings to embeddings.
pub trait Embedder {
    fn embed_texts(&self, texts: &[&[TokenId]]) -> Result<Vec<Vec<f64>>>;
    fn embed_images(&self, images: &[&[TokenId]]) -> Result<Vec<Vec<f64>>>;
}

const CHUNK: usize = 256;

impl Embedder for ModelBundle {
    fn embed_texts(&self, texts: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for c in texts.chunks(CHUNK) {
            out.extend(ModelBundle::embed_texts(self, c)?);
        }
        Ok(out)
    }

    fn embed_images(&self, images: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for c in images.chunks(CHUNK) {
            out.extend(ModelBundle::embed_images(self, c)?);
        }
        Ok(out)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            left: alloc::vec![a.len()],
            right: alloc::vec![b.len()],
        });
    }
    let dot = canonical_sum(a.iter().zip(b).map(|(x, y)| x * y));
    let na = libm::sqrt(canonical_sum(a.iter().map(|x| x * x)));
    let nb = libm::sqrt(canonical_sum(b.iter().map(|x| x * x)));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na * nb))
}

fn no_negatives(item_id: u64) -> Error {
    Error::Invalid(format!("benchmark item {item_id} has no negatives"))
}

/// The positive outranks every negative.
pub fn single_correct(pos: f64, negs: &[f64]) -> Option<bool> {
    (!negs.is_empty()).then(|| negs.iter().all(|n| pos > *n))
}

/// Every positive outranks every negative.
pub fn itt_correct(pos: &[f64], negs: &[f64]) -> Option<bool> {
    if pos.is_empty() || negs.is_empty() {
        return None;
    }
    let lo = pos.iter().cloned().fold(f64::INFINITY, f64::min);
    Some(negs.iter().all(|n| lo > *n))
}

/// The positive pair is closer than every positive-negative pair.
/// `pos_neg[p][n]` is the similarity of positive `p` and negative `n`.
pub fn tot_correct(pos_pos: f64, pos_neg: &[Vec<f64>]) -> Option<bool> {
    if pos_neg.is_empty() || pos_neg.iter().any(|r| r.is_empty()) {
        return None;
    }
    Some(pos_neg.iter().flatten().all(|s| pos_pos > *s))
}

/// Per-item similarities and verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub item_id: u64,
    pub category: String,
    /// Image-caption similarities of the positives.
    pub pos_sims: Vec<f64>,
    /// Image-caption similarities of the negatives.
    pub neg_sims: Vec<f64>,
    /// Caption-caption similarity of the two positives, when there are two.
    pub pos_pos_sim: Option<f64>,
    /// Caption-caption similarities, one row per positive.
    pub pos_neg_sims: Vec<Vec<f64>>,
    /// First positive against all negatives.
    pub correct_single: bool,
    pub correct_itt: Option<bool>,
    pub correct_tot: Option<bool>,
}

impl RankingResult {
    /// Recomputes the verdicts from the stored similarities.
    pub fn from_sims(
        item_id: u64,
        category: &str,
        pos_sims: Vec<f64>,
        neg_sims: Vec<f64>,
        pos_pos_sim: Option<f64>,
        pos_neg_sims: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let first = *pos_sims
            .first()
            .ok_or_else(|| Error::Invalid(format!("benchmark item {item_id} has no positives")))?;
        let correct_single = single_correct(first, &neg_sims).ok_or_else(|| no_negatives(item_id))?;
        let (correct_itt, correct_tot) = match pos_pos_sim {
            Some(pp) if pos_sims.len() >= 2 => (itt_correct(&pos_sims, &neg_sims), tot_correct(pp, &pos_neg_sims)),
            _ => (None, None),
        };
        Ok(Self {
            item_id,
            category: category.into(),
            pos_sims,
            neg_sims,
            pos_pos_sim,
            pos_neg_sims,
            correct_single,
            correct_itt,
            correct_tot,
        })
    }
}

/// Scores every item of a suite.
pub fn rank_items<E: Embedder + ?Sized>(model: &E, items: &[BenchmarkItem]) -> Result<Vec<RankingResult>> {
    let mut texts: Vec<&[TokenId]> = Vec::new();
    let mut images: Vec<&[TokenId]> = Vec::with_capacity(items.len());
    for it in items {
        if it.negatives.is_empty() {
            return Err(no_negatives(it.item_id));
        }
        images.push(&it.image.tokens);
        texts.extend(it.positives.iter().map(|c| c.tokens.as_slice()));
        texts.extend(it.negatives.iter().map(|c| c.tokens.as_slice()));
    }
    let text_emb = model.embed_texts(&texts)?;
    let image_emb = model.embed_images(&images)?;
    let mut out = Vec::with_capacity(items.len());
    let mut k = 0;
    for (it, img) in items.iter().zip(&image_emb) {
        let pos = &text_emb[k..k + it.positives.len()];
        k += it.positives.len();
        let neg = &text_emb[k..k + it.negatives.len()];
        k += it.negatives.len();
        let pos_sims = pos.iter().map(|p| cosine(img, p)).collect::<Result<Vec<_>>>()?;
        let neg_sims = neg.iter().map(|n| cosine(img, n)).collect::<Result<Vec<_>>>()?;
        let (pos_pos_sim, pos_neg_sims) = if pos.len() >= 2 {
            let pp = cosine(&pos[0], &pos[1])?;
            let pn = pos
                .iter()
                .map(|p| neg.iter().map(|n| cosine(p, n)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            (Some(pp), pn)
        } else {
            (None, Vec::new())
        };
        out.push(RankingResult::from_sims(
            it.item_id,
            it.category_label(),
            pos_sims,
            neg_sims,
            pos_pos_sim,
            pos_neg_sims,
        )?);
    }
    Ok(out)
}

fn fraction(hits: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut n, mut k) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += h as usize;
    }
    (n > 0).then(|| k as f64 / n as f64)
}

/// Accuracies over a set of ranking results.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub items: usize,
    pub single: f64,
    pub itt: Option<f64>,
    pub tot: Option<f64>,
}

pub fn summarize(results: &[RankingResult]) -> Option<Summary> {
    Some(Summary {
        items: results.len(),
        single: fraction(results.iter().map(|r| r.correct_single))?,
        itt: fraction(results.iter().filter_map(|r| r.correct_itt)),
        tot: fraction(results.iter().filter_map(|r| r.correct_tot)),
    })
}

/// Summaries per category label, in label order.
pub fn summarize_by_category(results: &[RankingResult]) -> BTreeMap<String, Summary> {
    let mut groups: BTreeMap<String, Vec<RankingResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.category.clone()).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| summarize(&v).map(|s| (k, s)))
        .collect()
}

/// Fraction of items whose first positive outranks all negatives.
pub fn single_positive_accuracy<E: Embedder + ?Sized>(model: &E, items: &[BenchmarkItem]) -> Result<f64> {
    if items.iter().any(|i| i.positives.len() != 1) {
        return Err(Error::Invalid("single-positive accuracy needs exactly one positive per item".into()));
    }
    let r = rank_items(model, items)?;
    summarize(&r)
        .map(|s| s.single)
        .ok_or_else(|| Error::Invalid("empty suite".into()))
}

fn paired<E: Embedder + ?Sized>(model: &E, items: &[BenchmarkItem]) -> Result<Summary> {
    if items.iter().any(|i| i.positives.len() != 2) {
        return Err(Error::Invalid("paired metrics need exactly two positives per item".into()));
    }
    let r = rank_items(model, items)?;
    summarize(&r).ok_or_else(|| Error::Invalid("empty suite".into()))
}

pub fn itt_accuracy<E: Embedder + ?Sized>(model: &E, items: &[BenchmarkItem]) -> Result<f64> {
    Ok(paired(model, items)?.itt.unwrap_or(0.0))
}

pub fn tot_accuracy<E: Embedder + ?Sized>(model: &E, items: &[BenchmarkItem]) -> Result<f64> {
    Ok(paired(model, items)?.tot.unwrap_or(0.0))
}

/// Index of the strict maximum, if unique.
fn strict_argmax(xs: &[f64]) -> Option<usize> {
    let best = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut hits = xs.iter().enumerate().filter(|(_, x)| **x == best);
    let first = hits.next()?.0;
    hits.next().is_none().then_some(first)
}

/// Recall@1 from a square similarity matrix (`sims[i][j]` between image
/// `i` and caption `j`): image-to-text and text-to-image.
pub fn recall_at_1(sims: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n = sims.len();
    if n == 0 || sims.iter().any(|r| r.len() != n) {
        return Err(Error::Invalid("retrieval needs a non-empty square similarity matrix".into()));
    }
    let i2t = (0..n).filter(|i| strict_argmax(&sims[*i]) == Some(*i)).count();
    let t2i = (0..n)
        .filter(|j| {
            let col: Vec<f64> = sims.iter().map(|r| r[*j]).collect();
            strict_argmax(&col) == Some(*j)
        })
        .count();
    Ok((i2t as f64 / n as f64, t2i as f64 / n as f64))
}

/// Recall@1 both ways for one-to-one image-caption pairs.
pub fn retrieval_accuracy<E: Embedder + ?Sized>(
    model: &E,
    images: &[&[TokenId]],
    captions: &[&[TokenId]],
) -> Result<(f64, f64)> {
    if images.len() != captions.len() {
        return Err(Error::Invalid("retrieval needs one caption per image".into()));
    }
    let u = model.embed_images(images)?;
    let v = model.embed_texts(captions)?;
    let sims = u
        .iter()
        .map(|a| v.iter().map(|b| cosine(a, b)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    recall_at_1(&sims)
}

/// Mean caption-caption similarities on a paired suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTrace {
    pub epoch: usize,
    pub pos_pos: f64,
    pub pos1_neg: f64,
    pub pos2_neg: f64,
}

impl SimilarityTrace {
    /// Mean over both positive-negative classes.
    pub fn pos_neg(&self) -> f64 {
        0.5 * (self.pos1_neg + self.pos2_neg)
    }
}

/// Similarity means from ranking results of a paired suite.
pub fn trace_from_results(results: &[RankingResult], epoch: usize) -> Result<SimilarityTrace> {
    let mut pp = Vec::new();
    let (mut p1, mut p2) = (Vec::new(), Vec::new());
    for r in results {
        let (Some(s), [a, b, ..]) = (r.pos_pos_sim, r.pos_neg_sims.as_slice()) else {
            return Err(Error::Invalid(format!("item {} lacks two positives", r.item_id)));
        };
        if a.is_empty() {
            return Err(no_negatives(r.item_id));
        }
        pp.push(s);
        p1.push(canonical_sum(a.iter().copied()) / a.len() as f64);
        p2.push(canonical_sum(b.iter().copied()) / b.len() as f64);
    }
    if pp.is_empty() {
        return Err(Error::Invalid("empty suite".into()));
    }
    let mean = |v: &[f64]| canonical_sum(v.iter().copied()) / v.len() as f64;
    Ok(SimilarityTrace {
        epoch,
        pos_pos: mean(&pp),
        pos1_neg: mean(&p1),
        pos2_neg: mean(&p2),
    })
}

pub fn track_pair_similarity<E: Embedder + ?Sized>(
    model: &E,
    items: &[BenchmarkItem],
    epoch: usize,
) -> Result<SimilarityTrace> {
    let r = rank_items(model, items)?;
    trace_from_results(&r, epoch)
}

#[cfg(test)]
mod tests;
