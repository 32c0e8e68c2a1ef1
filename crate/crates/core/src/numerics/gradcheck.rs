//! Central finite-difference oracle for taped gradients.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every scalar.
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the backward pass of `loss_fn` with central differences on every
/// parameter entry of `store`.
///
/// `loss_fn` builds a fresh graph over the given store and returns the scalar
/// loss node. The numeric side uses forward values only.
pub fn finite_difference_check<F>(store: &ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::relaxed(s);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };

    let base = eval(store)?;
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }
    if !base.is_finite() {
        return Err(Error::Oracle(format!("loss is not finite: {base}")));
    }

    let grads = {
        let mut g = Graph::relaxed(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in store.ids() {
        let n = store.value(id).len();
        for j in 0..n {
            let orig = store.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.param(id).map_or(0.0, |t| t.data()[j]);
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = j;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
