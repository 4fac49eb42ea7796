use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::layers::normal;
use super::ModelDims;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use crate::train::optim::{clip_grad_norm, lr_schedule, AdamW};
use crate::world::rng::seeded;
use crate::world::vocab::{Attribute, Noun, Relation};
use crate::world::{TokenId, PAD};

/// Smallest caption corpus accepted for decoder pre-training.
pub const PRETRAIN_MIN_CORPUS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Probability of dropping each token from the memory mean.
    pub token_dropout: f64,
    /// Standard deviation of Gaussian noise added to the memory.
    pub memory_noise: f64,
    pub held_out_fraction: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 3e-3,
            warmup: 50,
            token_dropout: 0.15,
            memory_noise: 0.05,
            held_out_fraction: 0.1,
            clip: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean training negative log-likelihood per token, by epoch.
    pub train_nll: Vec<f64>,
    /// Held-out per-token perplexity after each epoch.
    pub held_out_perplexity: Vec<f64>,
    /// Geometric-mean number of grammatical choices per predicted position.
    pub branching: f64,
    /// Fraction of held-out captions scored higher under their own memory
    /// than under the memory of a different caption.
    pub memory_win_rate: f64,
    pub train_size: usize,
    pub held_out_size: usize,
}

impl PretrainReport {
    pub fn final_perplexity(&self) -> f64 {
        self.held_out_perplexity.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Geometric mean, over the nine predicted positions of a caption, of how
/// many tokens the grammar allows there. Both wordings of every noun and
/// attribute count; the second noun excludes the first.
pub fn grammar_branching() -> f64 {
    let attr = (2 * Attribute::COUNT) as f64;
    let noun = (2 * Noun::COUNT) as f64;
    let other_noun = (2 * (Noun::COUNT - 1)) as f64;
    let rel = Relation::COUNT as f64;
    let slots = [1.0, attr, noun, 1.0, rel, 1.0, attr, other_noun, 1.0];
    let ln: f64 = slots.iter().map(|s| libm::log(*s)).sum();
    libm::exp(ln / slots.len() as f64)
}

struct Stage0<'a> {
    store: &'a ParamStore,
    decoder: &'a super::Decoder,
    table: ParamId,
}

impl Stage0<'_> {
    /// Mean of throwaway embedding rows over the caption's tokens.
    fn memory(
        &self,
        g: &mut Graph,
        batch: &[&[TokenId]],
        dropout: f64,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let len = batch.iter().map(|s| s.len()).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(batch.len() * len);
        let mut keep = Vec::with_capacity(batch.len() * len);
        for s in batch {
            let start = keep.len();
            for t in 0..len {
                match s.get(t) {
                    Some(tok) if *tok != PAD => {
                        ids.push(*tok as usize);
                        keep.push(dropout == 0.0 || rng.gen::<f64>() >= dropout);
                    }
                    _ => {
                        ids.push(0);
                        keep.push(false);
                    }
                }
            }
            if !keep[start..].iter().any(|k| *k) {
                let first = (0..s.len()).find(|t| s[*t] != PAD).unwrap_or(0);
                keep[start + first] = true;
            }
        }
        let table = g.param(self.store, self.table);
        let rows = g.embedding(table, &ids)?;
        let mem = g.masked_mean_pool(rows, len, &keep)?;
        if noise > 0.0 {
            let shape = g.shape(mem).to_vec();
            let eps = g.constant(normal(&shape, noise, rng));
            g.add(mem, eps)
        } else {
            Ok(mem)
        }
    }

    /// Summed log-likelihood and token count under clean memories.
    fn score(&self, captions: &[&[TokenId]], memories: &[&[TokenId]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(captions.len());
        for (caps, mems) in captions.chunks(256).zip(memories.chunks(256)) {
            let mut g = Graph::new();
            let mut rng = seeded(0, 0);
            let mem = self.memory(&mut g, mems, 0.0, 0.0, &mut rng)?;
            let ll = self.decoder.log_likelihood(&mut g, self.store, mem, caps)?;
            out.extend_from_slice(g.value(ll).data());
        }
        Ok(out)
    }
}

fn predicted_tokens(s: &[TokenId]) -> usize {
    s.iter().filter(|t| **t != PAD).count().saturating_sub(1)
}

/// Trains a decoder to reconstruct captions from a noisy bag of their
/// position-tagged tokens, then returns its parameters frozen.
///
/// The returned store holds only `decoder.*` parameters.
pub fn pretrain_decoder(
    corpus: &[Vec<TokenId>],
    dims: &ModelDims,
    cfg: &PretrainConfig,
) -> Result<(ParamStore, PretrainReport)> {
    if corpus.len() < PRETRAIN_MIN_CORPUS {
        return Err(Error::Invalid(format!(
            "decoder pre-training needs at least {PRETRAIN_MIN_CORPUS} captions, got {}",
            corpus.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Invalid("batch size and epochs must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.token_dropout) || !(0.0..1.0).contains(&cfg.held_out_fraction) {
        return Err(Error::Invalid("dropout and held-out fraction must lie in [0, 1)".into()));
    }
    let mut rng = seeded(cfg.seed, 0xdec0);
    let mut store = ParamStore::new();
    let decoder = dims.new_decoder(&mut store, &mut rng);
    let table = store.insert(
        "stage0.memory",
        normal(&[dims.text_vocab, dims.dec_width], 1.0, &mut rng),
    );

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let held = ((corpus.len() as f64 * cfg.held_out_fraction).round() as usize).max(1);
    let (held_idx, train_idx) = order.split_at(held);
    let held_out: Vec<&[TokenId]> = held_idx.iter().map(|i| corpus[*i].as_slice()).collect();
    let mut train: Vec<&[TokenId]> = train_idx.iter().map(|i| corpus[*i].as_slice()).collect();
    let held_tokens: usize = held_out.iter().map(|s| predicted_tokens(s)).sum();

    let ids: Vec<ParamId> = store.ids().collect();
    let decay = alloc::vec![false; ids.len()];
    let mut opt = AdamW::new(0.0);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut step = 0u64;
    let mut train_nll = Vec::with_capacity(cfg.epochs);
    let mut held_out_perplexity = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let (mut nll, mut count) = (0.0, 0usize);
        for batch in train.chunks(cfg.batch_size) {
            let tokens: usize = batch.iter().map(|s| predicted_tokens(s)).sum();
            store.zero_grad();
            let mut g = Graph::new();
            let stage = Stage0 {
                store: &store,
                decoder: &decoder,
                table,
            };
            let mem = stage.memory(&mut g, batch, cfg.token_dropout, cfg.memory_noise, &mut rng)?;
            let ll = decoder.log_likelihood(&mut g, &store, mem, batch)?;
            let total_ll = g.sum(ll);
            let loss = g.scale(total_ll, -1.0 / tokens as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Invalid(format!("decoder pre-training diverged at step {step}")));
            }
            nll += value * tokens as f64;
            count += tokens;
            g.backward(loss, &mut store)?;
            clip_grad_norm(&mut store, &ids, cfg.clip);
            let lr = lr_schedule(step, cfg.warmup, total, cfg.lr);
            opt.update(&mut store, &ids, &decay, lr);
            step += 1;
        }
        train_nll.push(nll / count as f64);
        let stage = Stage0 {
            store: &store,
            decoder: &decoder,
            table,
        };
        let ll: f64 = stage.score(&held_out, &held_out)?.iter().sum();
        held_out_perplexity.push(libm::exp(-ll / held_tokens as f64));
    }

    let stage = Stage0 {
        store: &store,
        decoder: &decoder,
        table,
    };
    let others: Vec<&[TokenId]> = (0..held_out.len())
        .map(|i| {
            let mut j = rng.gen_range(0..corpus.len());
            while corpus[j].as_slice() == held_out[i] {
                j = rng.gen_range(0..corpus.len());
            }
            corpus[j].as_slice()
        })
        .collect();
    let own = stage.score(&held_out, &held_out)?;
    let foreign = stage.score(&held_out, &others)?;
    let wins = own.iter().zip(&foreign).filter(|(a, b)| a > b).count();

    let mut frozen = ParamStore::new();
    for id in decoder.ids() {
        let p = store.get(id);
        let new = frozen.insert(p.name.clone(), p.value.clone());
        frozen.set_requires_grad(new, false);
    }
    let report = PretrainReport {
        train_nll,
        held_out_perplexity,
        branching: grammar_branching(),
        memory_win_rate: wins as f64 / held_out.len() as f64,
        train_size: train.len(),
        held_out_size: held_out.len(),
    };
    Ok((frozen, report))
}
