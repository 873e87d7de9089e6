use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::Result;

/// Denominator floor for the relative error, so gradients that are both
/// numerically zero compare as equal instead of dividing noise by noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences for every value of every parameter in `params`.
///
/// `stride` > 1 checks every `stride`-th value of each parameter.
pub fn grad_check<F>(f: F, store: &ParamStore, params: &[ParamId], epsilon: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    let grads = graph.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &id in params {
        let analytic = grads.dense(id, store);
        let len = store.tensor(id).len();
        for k in (0..len).step_by(stride.max(1)) {
            let original = store.tensor(id).data()[k];
            work.tensor_mut(id).data_mut()[k] = original + epsilon;
            let plus = eval(&work)?;
            work.tensor_mut(id).data_mut()[k] = original - epsilon;
            let minus = eval(&work)?;
            work.tensor_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst_param.is_none() {
                report.max_relative_error = err;
                report.worst_param = Some(store.get(id).name.clone());
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
