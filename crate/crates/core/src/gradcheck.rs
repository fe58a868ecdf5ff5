//! Central finite-difference checks for tape gradients (64-bit).

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParameterStore};

/// Perturbation used by the default checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn record(&mut self, m: Mismatch) {
        self.checked += 1;
        if m.rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(m.rel_error);
            self.worst = Some(m);
        }
    }
}

/// Compare tape gradients of a scalar loss against central differences for
/// every scalar of the selected parameters (all when `ids` is `None`).
pub fn check_params(
    store: &ParameterStore<f64>,
    ids: Option<&[ParamId]>,
    loss: impl Fn(&mut Tape<f64>) -> Result<Var>,
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?.into_params()
    };
    let selected: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape)?;
        Ok(tape.scalar(l))
    };
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for id in selected {
        let base = store.get(id).data().to_vec();
        for i in 0..base.len() {
            probe.get_mut(id).data_mut()[i] = base[i] + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = base[i] - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = base[i];
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map(|g| g[i]).unwrap_or(0.0);
            report.record(Mismatch {
                param: store.entry(id).name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, floor),
            });
        }
    }
    Ok(report)
}
