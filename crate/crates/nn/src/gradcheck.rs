//! Central finite-difference checks against tape gradients.

use rand::Rng;

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckPoint {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckPoint {
    /// Relative error with an absolute floor so near-zero gradients do not blow up.
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Central difference of `loss` with respect to one scalar parameter.
pub fn numeric_grad(
    store: &mut ParamStore,
    id: ParamId,
    row: usize,
    col: usize,
    eps: f64,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(id)[[row, col]];
    store.get_mut(id)[[row, col]] = orig + eps;
    let plus = loss(store);
    store.get_mut(id)[[row, col]] = orig - eps;
    let minus = loss(store);
    store.get_mut(id)[[row, col]] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Sample `n` random scalar coordinates (weighted by tensor size) and compare the
/// supplied analytic gradient with central differences.
pub fn check_random_coords<R: Rng>(
    store: &mut ParamStore,
    analytic: &dyn Fn(&ParamStore) -> std::collections::HashMap<ParamId, ndarray::Array2<f64>>,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
    n: usize,
    eps: f64,
    rng: &mut R,
) -> Vec<GradCheckPoint> {
    let grads = analytic(store);
    let candidates: Vec<ParamId> = store.ids().filter(|id| grads.contains_key(id)).collect();
    assert!(!candidates.is_empty(), "no parameter received a gradient");
    let total: usize = candidates.iter().map(|&id| store.get(id).len()).sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random_range(0..total);
        let mut chosen = candidates[0];
        for &id in &candidates {
            let len = store.get(id).len();
            if pick < len {
                chosen = id;
                break;
            }
            pick -= len;
        }
        let cols = store.get(chosen).ncols();
        let (row, col) = (pick / cols, pick % cols);
        let numeric = numeric_grad(store, chosen, row, col, eps, loss);
        out.push(GradCheckPoint {
            param: store.name(chosen).to_string(),
            row,
            col,
            analytic: grads[&chosen][[row, col]],
            numeric,
        });
    }
    out
}
