use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Large negative logit used to mask attention scores.
pub(crate) const MASKED: f64 = -1e30;

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / libm::sqrt(fan_in as f64);
        let weight = store.insert(format!("{name}.weight"), normal(&[fan_in, fan_out], std, rng));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros([fan_out])));
        Self { weight, bias }
    }

    /// `x @ W + b` for `x` of shape `[rows, fan_in]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        core::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::filled([d], 1.0)),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        alloc::vec![self.gain, self.bias]
    }
}

/// Single-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    d: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, true, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            d,
        }
    }

    /// Attends `n` query sequences of length `lq` (rows of `xq`) over `n`
    /// key sequences of length `lk` (rows of `xkv`).
    ///
    /// `mask`, when given, has `n * lq * lk` entries; true hides a key.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        n: usize,
        lq: usize,
        lk: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let d = self.d;
        let q = self.query.forward(g, store, xq)?;
        let k = self.key.forward(g, store, xkv)?;
        let v = self.value.forward(g, store, xkv)?;
        let q = g.reshape(q, &[n, lq, d])?;
        let k = g.reshape(k, &[n, lk, d])?;
        let v = g.reshape(v, &[n, lk, d])?;
        let scores = g.matmul_nt(q, k)?;
        let mut scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
        if let Some(mask) = mask {
            scores = g.masked_fill(scores, mask, MASKED)?;
        }
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.reshape(ctx, &[n * lq, d])?;
        self.out.forward(g, store, ctx)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.out]
            .iter()
            .flat_map(|l| l.ids())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.up.ids().into_iter().chain(self.down.ids()).collect()
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, hidden, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        n: usize,
        len: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, n, len, len, mask)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm1.ids();
        ids.extend(self.attn.ids());
        ids.extend(self.norm2.ids());
        ids.extend(self.ff.ids());
        ids
    }
}

/// Pre-norm block with causal self-attention and cross-attention to memory.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, rng),
            norm3: Norm::new(store, &format!("{name}.norm3"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, hidden, rng),
        }
    }

    /// `memory` has shape `[n * mem_len, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
        n: usize,
        len: usize,
        mem_len: usize,
        self_mask: &[bool],
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, n, len, len, Some(self_mask))?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, h, memory, n, len, mem_len, None)?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm1.ids();
        ids.extend(self.self_attn.ids());
        ids.extend(self.norm2.ids());
        ids.extend(self.cross_attn.ids());
        ids.extend(self.norm3.ids());
        ids.extend(self.ff.ids());
        ids
    }
}
