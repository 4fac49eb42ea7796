use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{normal, DecoderBlock, Linear, Norm};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::world::{TokenId, PAD};

/// Autoregressive decoder conditioned on a single memory vector through
/// cross-attention.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub norm: Norm,
    pub head: Linear,
    vocab: usize,
    max_len: usize,
    width: usize,
}

/// A batch of teacher-forced targets, padded to a common length.
struct Targets {
    n: usize,
    steps: usize,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    valid: Vec<bool>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        max_len: usize,
        width: usize,
        hidden: usize,
        blocks: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let tokens = store.insert(format!("{name}.tokens"), normal(&[vocab, width], 1.0, rng));
        let positions = store.insert(format!("{name}.positions"), normal(&[max_len, width], 1.0, rng));
        let blocks = (0..blocks)
            .map(|i| DecoderBlock::new(store, &format!("{name}.block{i}"), width, hidden, rng))
            .collect();
        let norm = Norm::new(store, &format!("{name}.norm"), width);
        let head = Linear::new(store, &format!("{name}.head"), width, vocab, true, rng);
        Self {
            tokens,
            positions,
            blocks,
            norm,
            head,
            vocab,
            max_len,
            width,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tokens, self.positions];
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.extend(self.norm.ids());
        ids.extend(self.head.ids());
        ids
    }

    fn targets<S: AsRef<[TokenId]>>(&self, targets: &[S]) -> Result<Targets> {
        let n = targets.len();
        if n == 0 {
            return Err(Error::Invalid("decoder target batch is empty".into()));
        }
        let mut trimmed = Vec::with_capacity(n);
        for t in targets {
            let t = t.as_ref();
            let end = t.iter().rposition(|x| *x != PAD).map_or(0, |i| i + 1);
            let t = &t[..end];
            if t.len() < 2 {
                return Err(Error::Invalid(format!(
                    "decoder target needs at least 2 tokens, got {}",
                    t.len()
                )));
            }
            if t.len() > self.max_len {
                return Err(Error::Invalid(format!(
                    "decoder target length {} exceeds {}",
                    t.len(),
                    self.max_len
                )));
            }
            if let Some(bad) = t.iter().find(|x| **x as usize >= self.vocab) {
                return Err(Error::Invalid(format!(
                    "decoder target token {bad} outside vocabulary {}",
                    self.vocab
                )));
            }
            trimmed.push(t);
        }
        let steps = trimmed.iter().map(|t| t.len() - 1).max().unwrap_or(1);
        let mut inputs = Vec::with_capacity(n * steps);
        let mut outputs = Vec::with_capacity(n * steps);
        let mut valid = Vec::with_capacity(n * steps);
        for t in &trimmed {
            for s in 0..steps {
                let ok = s + 1 < t.len();
                inputs.push(if ok { t[s] as usize } else { PAD as usize });
                outputs.push(if ok { t[s + 1] as usize } else { 0 });
                valid.push(ok);
            }
        }
        Ok(Targets {
            n,
            steps,
            inputs,
            outputs,
            valid,
        })
    }

    /// Next-token log-probabilities, shape `[n * steps, vocab]`.
    fn log_probs(&self, g: &mut Graph, store: &ParamStore, memory: Var, t: &Targets) -> Result<Var> {
        let ms = g.shape(memory).to_vec();
        if ms != [t.n, self.width] {
            return Err(Error::ShapeMismatch {
                op: "decoder memory",
                left: ms,
                right: vec![t.n, self.width],
            });
        }
        let (n, len) = (t.n, t.steps);
        let table = g.param(store, self.tokens);
        let pos_table = g.param(store, self.positions);
        let tok = g.embedding(table, &t.inputs)?;
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let pos = g.embedding(pos_table, &pos_ids)?;
        let mut x = g.add(tok, pos)?;
        let mask: Vec<bool> = (0..n)
            .flat_map(|s| {
                let valid = &t.valid;
                (0..len).flat_map(move |q| (0..len).map(move |k| k > q || !valid[s * len + k]))
            })
            .collect();
        for block in &self.blocks {
            x = block.forward(g, store, x, memory, n, len, 1, &mask)?;
        }
        let x = self.norm.forward(g, store, x)?;
        let logits = self.head.forward(g, store, x)?;
        g.log_softmax(logits)
    }

    /// Teacher-forced `sum_t log p(y_t | y_<t, h)` for every target,
    /// returned as a vector of length `targets.len()`.
    ///
    /// `memory` holds one conditioning row per target (`[n, width]`).
    /// Trailing PAD tokens are ignored.
    pub fn log_likelihood<S: AsRef<[TokenId]>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        targets: &[S],
    ) -> Result<Var> {
        let t = self.targets(targets)?;
        let lp = self.log_probs(g, store, memory, &t)?;
        let picked = g.gather(lp, &t.outputs)?;
        let invalid: Vec<bool> = t.valid.iter().map(|v| !v).collect();
        let picked = g.masked_fill(picked, &invalid, 0.0)?;
        let rows = g.reshape(picked, &[t.n, t.steps])?;
        let ones = g.constant(Tensor::filled([t.steps, 1], 1.0));
        let sums = g.matmul(rows, ones)?;
        g.reshape(sums, &[t.n])
    }

    /// Per-position log-probabilities of the targets (PAD positions hold 0),
    /// as plain numbers, shape `[n, steps]`.
    pub fn token_log_probs<S: AsRef<[TokenId]>>(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        targets: &[S],
    ) -> Result<Vec<Vec<f64>>> {
        let t = self.targets(targets)?;
        let mut g = Graph::new();
        let m = g.constant(memory.clone());
        let lp = self.log_probs(&mut g, store, m, &t)?;
        let lp = g.value(lp).data();
        let v = self.vocab;
        Ok((0..t.n)
            .map(|s| {
                (0..t.steps)
                    .map(|k| {
                        let r = s * t.steps + k;
                        if t.valid[r] {
                            lp[r * v + t.outputs[r]]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect())
    }
}
