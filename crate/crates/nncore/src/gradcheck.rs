//! Central finite-difference check of analytic gradients.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::Gradients;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the analytic gradient of `f` at `params` with
/// `(f(θ + h) − f(θ − h)) / 2h`, element by element.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64) -> Result<GradCheck>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = f(params)?;
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let (plus, _) = f(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - h;
            let (minus, _) = f(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::tape::Tape;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.add("theta", Matrix::from_rows(&[vec![0.3, -1.7, 2.5, 0.01]]).unwrap());
        let f = |p: &ParamStore| {
            let mut tape = Tape::new();
            let b = tape.bind(p, true);
            let sq = tape.square(b.get(p.ids().next().unwrap()));
            let loss = tape.sum(sq);
            let grads = tape.backward(loss)?.params(&b, p);
            Ok((tape.scalar(loss), grads))
        };
        let report = grad_check(f, &store, 1e-4).unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
