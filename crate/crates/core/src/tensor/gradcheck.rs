//! Central finite-difference gradient audit.
//!
//! Works purely through forward evaluations of the loss, so it is an
//! independent check of the hand-written backward passes in [`super::graph`].

use super::graph::{Grads, Graph, Var};
use super::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Relative error with an absolute floor so that two near-zero gradients compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backprop gradients of `loss_fn` against central differences for
/// every entry of every parameter in `ids`.
pub fn check<F>(store: &ParamStore, ids: &[ParamId], step: f64, loss_fn: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store);
    let grads: Grads = g.backward(loss);

    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s);
        g.scalar(l)
    };

    let mut work = store.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for &id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id).as_slice().expect("contiguous parameter")[i];
            work.value_mut(id).as_slice_mut().unwrap()[i] = orig + step;
            let plus = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[i] = orig - step;
            let minus = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |m| m.as_slice().unwrap()[i]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i, analytic, numeric));
            }
        }
    }
    report
}
