use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{ParamId, ParamStore};

/// Adam with decoupled weight decay.
///
/// Moment buffers are dense and indexed by [`ParamId`]; parameters that
/// never received an update have empty buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update of the listed parameters from their stored gradients.
    /// `decay[i]` says whether `ids[i]` is subject to weight decay.
    pub fn update(&mut self, store: &mut ParamStore, ids: &[ParamId], decay: &[bool], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let slots = store.len();
        if self.first.len() < slots {
            self.first.resize(slots, Vec::new());
            self.second.resize(slots, Vec::new());
        }
        for (id, dec) in ids.iter().zip(decay) {
            let p = store.get_mut(*id);
            if !p.requires_grad {
                continue;
            }
            let n = p.value.len();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let wd = if *dec { self.weight_decay } else { 0.0 };
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= lr * (mhat / (libm::sqrt(vhat) + self.eps) + wd * value[i]);
            }
        }
    }
}

/// Global L2 norm of the gradients of `ids`.
pub fn grad_norm(store: &ParamStore, ids: &[ParamId]) -> f64 {
    let sq: f64 = ids
        .iter()
        .flat_map(|id| store.grad(*id).data().iter())
        .map(|g| g * g)
        .sum();
    libm::sqrt(sq)
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = grad_norm(store, ids);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for id in ids {
            store
                .get_mut(*id)
                .grad
                .data_mut()
                .iter_mut()
                .for_each(|g| *g *= s);
        }
    }
    norm
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay
/// reaching 0 at `total`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * peak * (1.0 + libm::cos(core::f64::consts::PI * progress))
}
