use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use super::caption::{parse_caption, CaptionRecord, Role};
use super::rng::seeded;
use crate::error::{invalid, Result};

/// Replaces `round(fraction * #paraphrases)` paraphrase records by captions
/// of unrelated scenes drawn uniformly from the non-negative records.
///
/// Replaced records keep their role and scene id; only the wording (tokens
/// and template) comes from the unrelated caption.
pub fn inject_paraphrase_noise(
    records: &[CaptionRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid("noise fraction must lie in [0, 1]"));
    }
    let mut out = records.to_vec();
    let para: Vec<usize> = (0..records.len())
        .filter(|i| records[*i].role == Role::Paraphrase)
        .collect();
    let k = libm::round(fraction * para.len() as f64) as usize;
    if k == 0 {
        return Ok(out);
    }
    let pool: Vec<usize> = (0..records.len())
        .filter(|i| records[*i].role != Role::HardNegative)
        .collect();
    let mut rng = seeded(seed, 0x0015e);
    let mut chosen: Vec<usize> = sample(&mut rng, para.len(), k).into_iter().map(|j| para[j]).collect();
    chosen.sort_unstable();
    for idx in chosen {
        let target = parse_caption(&records[idx].tokens)
            .ok_or_else(|| invalid("paraphrase does not follow the grammar"))?
            .meaning();
        let mut replacement = None;
        for _ in 0..1000 {
            let cand = &records[pool[rng.gen_range(0..pool.len())]];
            if parse_caption(&cand.tokens).is_some_and(|p| p.meaning() != target) {
                replacement = Some(cand);
                break;
            }
        }
        let cand = replacement.ok_or_else(|| invalid("no unrelated caption available for noise"))?;
        out[idx].tokens = cand.tokens.clone();
        out[idx].template = cand.template;
    }
    Ok(out)
}
