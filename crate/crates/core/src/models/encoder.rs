use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{normal, EncoderBlock, Linear, Norm};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use crate::world::TokenId;

/// Transformer encoder over a token sequence, mean-pooled and projected.
///
/// Serves as both the text encoder and the image encoder; the image
/// encoder reads visual ids, which start at `offset`.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: Norm,
    pub pool: Linear,
    offset: TokenId,
    vocab: usize,
    max_len: usize,
    pad: Option<TokenId>,
    name: &'static str,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderShape {
    pub vocab: usize,
    pub offset: TokenId,
    pub max_len: usize,
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub out: usize,
    pub pad: Option<TokenId>,
}

impl SequenceEncoder {
    pub fn new(store: &mut ParamStore, name: &'static str, shape: EncoderShape, rng: &mut impl Rng) -> Self {
        let d = shape.width;
        let tokens = store.insert(format!("{name}.tokens"), normal(&[shape.vocab, d], 1.0, rng));
        let positions = store.insert(format!("{name}.positions"), normal(&[shape.max_len, d], 1.0, rng));
        let blocks = (0..shape.blocks)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), d, shape.hidden, rng))
            .collect();
        let norm = Norm::new(store, &format!("{name}.norm"), d);
        let pool = Linear::new(store, &format!("{name}.pool"), d, shape.out, false, rng);
        Self {
            tokens,
            positions,
            blocks,
            norm,
            pool,
            offset: shape.offset,
            vocab: shape.vocab,
            max_len: shape.max_len,
            pad: shape.pad,
            name,
        }
    }

    pub fn validate(&self, seq: &[TokenId]) -> Result<()> {
        if seq.is_empty() || seq.len() > self.max_len {
            return Err(Error::Invalid(format!(
                "{} input length {} outside 1..={}",
                self.name,
                seq.len(),
                self.max_len
            )));
        }
        let hi = self.offset as usize + self.vocab;
        if let Some(bad) = seq.iter().find(|t| **t < self.offset || **t as usize >= hi) {
            return Err(Error::Invalid(format!(
                "{} token {bad} outside vocabulary {}..{hi}",
                self.name, self.offset
            )));
        }
        if seq.iter().all(|t| Some(*t) == self.pad) {
            return Err(Error::Invalid(format!("{} input is all padding", self.name)));
        }
        Ok(())
    }

    /// Embeds a batch of sequences; output shape `[seqs.len(), out]`.
    pub fn forward<S: AsRef<[TokenId]>>(&self, g: &mut Graph, store: &ParamStore, seqs: &[S]) -> Result<Var> {
        let n = seqs.len();
        if n == 0 {
            return Err(Error::Invalid(format!("{} batch is empty", self.name)));
        }
        for s in seqs {
            self.validate(s.as_ref())?;
        }
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(n * len);
        let mut live = Vec::with_capacity(n * len);
        for s in seqs {
            let s = s.as_ref();
            for t in 0..len {
                match s.get(t) {
                    Some(tok) => {
                        ids.push((*tok - self.offset) as usize);
                        live.push(Some(*tok) != self.pad);
                    }
                    None => {
                        ids.push(0);
                        live.push(false);
                    }
                }
            }
        }
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let table = g.param(store, self.tokens);
        let pos_table = g.param(store, self.positions);
        let tok = g.embedding(table, &ids)?;
        let pos = g.embedding(pos_table, &pos_ids)?;
        let mut x = g.add(tok, pos)?;

        let needs_mask = live.iter().any(|l| !l);
        let mask: Vec<bool> = if needs_mask {
            (0..n)
                .flat_map(|s| {
                    let live = &live;
                    (0..len).flat_map(move |_| (0..len).map(move |k| !live[s * len + k]))
                })
                .collect()
        } else {
            Vec::new()
        };
        let mask = needs_mask.then_some(mask.as_slice());
        for block in &self.blocks {
            x = block.forward(g, store, x, n, len, mask)?;
        }
        let x = self.norm.forward(g, store, x)?;
        let pooled = g.masked_mean_pool(x, len, &live)?;
        self.pool.forward(g, store, pooled)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.tokens, self.positions];
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.extend(self.norm.ids());
        ids.extend(self.pool.ids());
        ids
    }
}
