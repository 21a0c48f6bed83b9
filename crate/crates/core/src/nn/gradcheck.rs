//! Central finite-difference verification of analytic gradients.
//!
//! `loss` must rebuild its tape from the store on every call so that
//! perturbed parameter values are picked up.

use super::params::{ParamId, ParamStore};
use super::tape::Tape;

/// Maximum relative error between analytic and numeric gradients over all
/// scalar entries of the listed parameters.
///
/// Relative error is |a - n| / max(1, |a|, |n|), which behaves sensibly
/// when both gradients are near zero.
pub fn check_param_grads(
    store: &mut ParamStore,
    ids: &[ParamId],
    loss: impl Fn(&ParamStore) -> Tape,
    h: f64,
) -> f64 {
    // Analytic pass.
    store.zero_grads();
    let tape = loss(store);
    let root = crate::nn::tape::Var(tape.len() - 1);
    tape.backward(root, store);
    let analytic: Vec<ndarray::Array2<f64>> =
        ids.iter().map(|&id| store.grad(id).clone()).collect();

    let eval = |store: &ParamStore| -> f64 {
        let tape = loss(store);
        tape.scalar_value(crate::nn::tape::Var(tape.len() - 1))
    };

    let mut max_rel: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let dim = store.value(id).raw_dim();
        let (rows, cols) = (dim[0], dim[1]);
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.value(id)[[i, j]];
                store.value_mut(id)[[i, j]] = orig + h;
                let up = eval(store);
                store.value_mut(id)[[i, j]] = orig - h;
                let down = eval(store);
                store.value_mut(id)[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[k][[i, j]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
    }
    max_rel
}

/// Like [`check_param_grads`] but probes only a deterministic subset of
/// entries per parameter, for larger models where the full sweep is slow.
pub fn check_param_grads_sampled(
    store: &mut ParamStore,
    ids: &[ParamId],
    loss: impl Fn(&ParamStore) -> Tape,
    h: f64,
    max_entries_per_param: usize,
) -> f64 {
    store.zero_grads();
    let tape = loss(store);
    let root = crate::nn::tape::Var(tape.len() - 1);
    tape.backward(root, store);
    let analytic: Vec<ndarray::Array2<f64>> =
        ids.iter().map(|&id| store.grad(id).clone()).collect();

    let eval = |store: &ParamStore| -> f64 {
        let tape = loss(store);
        tape.scalar_value(crate::nn::tape::Var(tape.len() - 1))
    };

    let mut max_rel: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let dim = store.value(id).raw_dim();
        let n = dim[0] * dim[1];
        let stride = (n / max_entries_per_param).max(1);
        let mut probed = 0;
        let mut flat = 0;
        while flat < n && probed < max_entries_per_param {
            let (i, j) = (flat / dim[1], flat % dim[1]);
            let orig = store.value(id)[[i, j]];
            store.value_mut(id)[[i, j]] = orig + h;
            let up = eval(store);
            store.value_mut(id)[[i, j]] = orig - h;
            let down = eval(store);
            store.value_mut(id)[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k][[i, j]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            flat += stride;
            probed += 1;
        }
    }
    max_rel
}
