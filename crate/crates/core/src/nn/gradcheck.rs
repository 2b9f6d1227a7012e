//! Central finite-difference gradient checking.
//!
//! Only evaluates the loss closure; never touches the reverse pass, so it is an
//! independent oracle for [`Tape::backward`](super::Tape::backward).

use super::params::ParamStore;
use super::tape::Gradients;

/// Worst disagreement found by [`check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is numerically zero compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` for every scalar
/// in `store`.
pub fn check<F>(store: &ParamStore, analytic: &Gradients, step: f64, floor: f64, loss: F) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pi in 0..store.len() {
        let shape = store.values()[pi].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let original = store.values()[pi][[r, c]];
                probe.values_mut()[pi][[r, c]] = original + step;
                let up = loss(&probe);
                probe.values_mut()[pi][[r, c]] = original - step;
                let down = loss(&probe);
                probe.values_mut()[pi][[r, c]] = original;

                let numeric = (up - down) / (2.0 * step);
                let a = analytic.grads[pi][[r, c]];
                let err = relative_error(a, numeric, floor);
                report.checked += 1;
                if report.checked == 1 || err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst_param = store.names()[pi].clone();
                    report.worst_index = (r, c);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    report
}
