//! Central finite-difference gradient verification.

use super::tensor::{ParamId, ParameterStore};
use crate::error::Result;

/// Verdict for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub elements_checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Elements probed per tensor (spread deterministically over the tensor).
    pub samples_per_tensor: usize,
    /// Relative-error threshold.
    pub tolerance: f64,
    /// Differences below this are treated as zero agreement.
    pub absolute_floor: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-4,
            samples_per_tensor: 6,
            tolerance: 1e-4,
            absolute_floor: 1e-9,
        }
    }
}

/// Compare the analytic gradients already accumulated in `store` against
/// central finite differences of `loss_fn`, probing a deterministic sample
/// of elements in every parameter tensor.
///
/// `loss_fn` must be a pure function of the parameter values (fixed inputs,
/// fixed randomness); it is re-evaluated twice per probed element.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    mut loss_fn: F,
    opts: CheckOptions,
) -> Result<Vec<TensorCheck>>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.value(id).len();
        let samples = opts.samples_per_tensor.min(len).max(1);
        // Spread probe indices across the tensor with a deterministic stride.
        let indices: Vec<usize> = (0..samples)
            .map(|k| k * len / samples + (len / (2 * samples)).min(len - 1))
            .map(|i| i.min(len - 1))
            .collect();

        let mut max_rel = 0.0_f64;
        for &i in &indices {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + opts.step;
            let plus = loss_fn(store)?;
            store.value_mut(id).data_mut()[i] = original - opts.step;
            let minus = loss_fn(store)?;
            store.value_mut(id).data_mut()[i] = original;

            let fd = (plus - minus) / (2.0 * opts.step);
            let analytic = store.grad(id).data()[i];
            let denom = fd.abs().max(analytic.abs());
            let rel = if denom < opts.absolute_floor {
                0.0
            } else {
                (fd - analytic).abs() / denom
            };
            max_rel = max_rel.max(rel);
        }
        reports.push(TensorCheck {
            name: store.name(id).to_string(),
            elements_checked: indices.len(),
            max_rel_err: max_rel,
            pass: max_rel < opts.tolerance,
        });
    }
    Ok(reports)
}
