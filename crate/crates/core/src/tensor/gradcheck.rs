//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation size for central differences.
    pub epsilon: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, multiplied by
    /// `max(1, |f|)`, so that gradients that are zero up to rounding are
    /// compared against the resolution of the finite differences.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            scale_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate of the worst error, as (parameter index, flat index).
    pub worst: Option<(usize, usize)>,
    /// Coordinates where the function was not finite at a perturbed point.
    pub non_finite: Vec<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

struct Tally {
    max: f64,
    worst: Option<(usize, usize)>,
    non_finite: Vec<(usize, usize)>,
    checked: usize,
}

impl Tally {
    fn new() -> Self {
        Self {
            max: 0.0,
            worst: None,
            non_finite: Vec::new(),
            checked: 0,
        }
    }

    fn record(
        &mut self,
        coord: (usize, usize),
        analytic: f64,
        plus: f64,
        minus: f64,
        cfg: &GradCheckConfig,
    ) {
        self.checked += 1;
        if !plus.is_finite() || !minus.is_finite() {
            self.non_finite.push(coord);
            return;
        }
        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let floor = cfg.scale_floor * plus.abs().max(minus.abs()).max(1.0);
        let e = rel_error(analytic, numeric, floor);
        if self.worst.is_none() || e > self.max {
            self.max = e;
            self.worst = Some(coord);
        }
    }

    fn finish(self, cfg: &GradCheckConfig) -> GradCheckReport {
        let passed = self.non_finite.is_empty() && self.max < cfg.tolerance;
        GradCheckReport {
            max_rel_error: self.max,
            worst: self.worst,
            non_finite: self.non_finite,
            checked: self.checked,
            passed,
        }
    }
}

/// Checks the gradient of a scalar function of one tensor at `point`.
///
/// `f` builds the function on a fresh graph from the input node.
pub fn grad_check<F>(f: F, point: &Tensor, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    let mut empty = ParamStore::new();
    let grads = g.backward(y, &mut empty)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let eval = |t: Tensor| -> f64 {
        let mut g = Graph::new();
        let x = g.constant(t);
        match f(&mut g, x) {
            Ok(y) => g.value(y).item(),
            Err(_) => f64::NAN,
        }
    };

    let mut tally = Tally::new();
    for i in 0..point.len() {
        let mut p = point.clone();
        p.data_mut()[i] += cfg.epsilon;
        let plus = eval(p);
        let mut m = point.clone();
        m.data_mut()[i] -= cfg.epsilon;
        let minus = eval(m);
        tally.record((0, i), analytic.data()[i], plus, minus, &cfg);
    }
    Ok(tally.finish(&cfg))
}

/// Checks parameter gradients of a loss built from a [`ParamStore`].
///
/// Only the listed `(parameter, flat index)` coordinates are perturbed,
/// which keeps checks on full models affordable.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g, &work)?;
    g.backward(y, &mut work)?;
    let analytic = work.clone();

    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        match f(&mut g, s) {
            Ok(y) => g.value(y).item(),
            Err(_) => f64::NAN,
        }
    };

    let mut tally = Tally::new();
    for &(id, i) in coords {
        let orig = work.value(id).data()[i];
        work.get_mut(id).value.data_mut()[i] = orig + cfg.epsilon;
        let plus = eval(&work);
        work.get_mut(id).value.data_mut()[i] = orig - cfg.epsilon;
        let minus = eval(&work);
        work.get_mut(id).value.data_mut()[i] = orig;
        tally.record((id.index(), i), analytic.grad(id).data()[i], plus, minus, &cfg);
    }
    Ok(tally.finish(&cfg))
}
