//! Contrastive, reconstruction and alignment objectives.
//!
//! Temperatures enter as the graph scalar `inv_tau = 1 / tau`. Softmax
//! denominators are computed as log-sum-exp over `cos / tau`, never as raw
//! products of `exp` terms.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::models::Decoder;
use crate::tensor::{Graph, ParamStore, Var};
use crate::world::TokenId;

const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of token reconstruction.
    pub alpha: f64,
    /// Weight of sentence alignment.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite() && beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Invalid(format!(
                "loss weights must be finite and non-negative, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

fn check_inv_tau(g: &Graph, inv_tau: Var) -> Result<()> {
    let t = g.value(inv_tau);
    if t.len() != 1 || !(t.item() > 0.0) || !t.item().is_finite() {
        return Err(Error::Domain {
            op: "temperature",
            detail: format!("tau must be positive and finite, got 1/tau = {:?}", t.data()),
        });
    }
    Ok(())
}

fn check_rows(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    Ok(sa[0])
}

/// `exp(cos(x, y) / tau)` for two vectors.
pub fn phi(g: &mut Graph, x: Var, y: Var, inv_tau: Var) -> Result<Var> {
    check_inv_tau(g, inv_tau)?;
    let c = g.cosine_similarity(x, y)?;
    let z = g.scale_by(c, inv_tau)?;
    g.exp(z)
}

/// `cos(a_i, b_j) / tau` for all row pairs.
pub fn scaled_cosines(g: &mut Graph, a: Var, b: Var, inv_tau: Var) -> Result<Var> {
    let c = g.cosine_matrix(a, b)?;
    g.scale_by(c, inv_tau)
}

/// `-mean_i log softmax(logits_i)[target_i]`.
fn info_nce(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let lsm = g.log_softmax(logits)?;
    let picked = g.gather(lsm, targets)?;
    let m = g.mean(picked)?;
    Ok(g.neg(m))
}

fn diagonal(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Symmetric image-text InfoNCE over the in-batch captions.
///
/// `u` and `v` are `[B, d]`; row `i` of each forms the positive pair.
pub fn contrastive_loss(g: &mut Graph, u: Var, v: Var, inv_tau: Var) -> Result<Var> {
    hard_negative_contrastive_loss(g, u, v, None, inv_tau, false)
}

/// Image-text InfoNCE with hard negative captions.
///
/// `negatives` holds `B * M` rows, the `M` negatives of image `i` at rows
/// `i*M..(i+1)*M`. Every negative joins the denominator of every image's
/// image-to-text row. The text-to-image direction sees no negatives unless
/// `symmetric` is set, in which case row `i` also competes against the
/// negatives of image `i`.
pub fn hard_negative_contrastive_loss(
    g: &mut Graph,
    u: Var,
    v: Var,
    negatives: Option<Var>,
    inv_tau: Var,
    symmetric: bool,
) -> Result<Var> {
    check_inv_tau(g, inv_tau)?;
    let b = check_rows(g, "contrastive", u, v)?;
    let d = g.shape(u)[1];
    let negatives = match negatives {
        Some(n) if g.shape(n)[0] > 0 => {
            let s = g.shape(n);
            if s.len() != 2 || s[1] != d || s[0] % b != 0 {
                return Err(Error::ShapeMismatch {
                    op: "hard negatives",
                    left: s.to_vec(),
                    right: alloc::vec![b, d],
                });
            }
            Some(n)
        }
        _ => None,
    };
    let sim = scaled_cosines(g, u, v, inv_tau)?;
    let sim_t = g.transpose(sim)?;
    let targets = diagonal(b);
    let (i2t, t2i) = match negatives {
        None => (sim, sim_t),
        Some(n) => {
            let m = g.shape(n)[0] / b;
            let hard = scaled_cosines(g, u, n, inv_tau)?;
            let i2t = g.concat_cols(&[sim, hard])?;
            let t2i = if symmetric {
                let foreign: Vec<bool> = (0..b)
                    .flat_map(|i| (0..b * m).map(move |c| c / m != i))
                    .collect();
                let own = g.masked_fill(hard, &foreign, MASKED)?;
                g.concat_cols(&[sim_t, own])?
            } else {
                sim_t
            };
            (i2t, t2i)
        }
    };
    let a = info_nce(g, i2t, &targets)?;
    let c = info_nce(g, t2i, &targets)?;
    let s = g.add(a, c)?;
    Ok(g.scale(s, 0.5))
}

/// `-(1 / (B K)) sum_i sum_k log p(y_ik | h_i)`.
///
/// `targets[i]` lists the `K` target captions of sample `i`; `h` is
/// `[B, d_dec]`.
pub fn token_reconstruction_loss<S: AsRef<[TokenId]>>(
    g: &mut Graph,
    decoder: &Decoder,
    store: &ParamStore,
    h: Var,
    targets: &[Vec<S>],
) -> Result<Var> {
    let b = targets.len();
    if g.shape(h).first() != Some(&b) {
        return Err(Error::ShapeMismatch {
            op: "reconstruction",
            left: g.shape(h).to_vec(),
            right: alloc::vec![b],
        });
    }
    if targets.iter().any(|t| t.is_empty()) {
        return Err(Error::Invalid("every sample needs at least one target".into()));
    }
    let rows: Vec<usize> = targets
        .iter()
        .enumerate()
        .flat_map(|(i, t)| core::iter::repeat(i).take(t.len()))
        .collect();
    let flat: Vec<&[TokenId]> = targets.iter().flatten().map(|t| t.as_ref()).collect();
    let memory = if rows.len() == b { h } else { g.embedding(h, &rows)? };
    let ll = decoder.log_likelihood(g, store, memory, &flat)?;
    reconstruction_from_log_likelihood(g, ll)
}

/// Negated mean of per-target log-likelihoods.
pub fn reconstruction_from_log_likelihood(g: &mut Graph, ll: Var) -> Result<Var> {
    let m = g.mean(ll)?;
    Ok(g.neg(m))
}

/// One-directional InfoNCE from each caption to the in-batch paraphrases.
pub fn sentence_alignment_loss(g: &mut Graph, v: Var, paraphrases: Var, inv_tau: Var) -> Result<Var> {
    check_inv_tau(g, inv_tau)?;
    let b = check_rows(g, "alignment", v, paraphrases)?;
    let sim = scaled_cosines(g, v, paraphrases, inv_tau)?;
    info_nce(g, sim, &diagonal(b))
}

/// `contrastive + alpha * reconstruction + beta * alignment`; absent
/// components count as zero.
pub fn read_loss(
    g: &mut Graph,
    contrastive: Var,
    reconstruction: Option<Var>,
    alignment: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    let weights = LossWeights::new(weights.alpha, weights.beta)?;
    let mut total = contrastive;
    if let Some(r) = reconstruction {
        let r = g.scale(r, weights.alpha);
        total = g.add(total, r)?;
    }
    if let Some(a) = alignment {
        let a = g.scale(a, weights.beta);
        total = g.add(total, a)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
