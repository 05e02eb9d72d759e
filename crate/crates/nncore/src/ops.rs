use crate::error::{NnError, Result};
use crate::tape::softmax;

/// `−ln pred[label]` for a probability vector.
pub fn cross_entropy(pred: &[f64], label: usize) -> Result<f64> {
    if label >= pred.len() {
        return Err(NnError::Index {
            index: label,
            len: pred.len(),
        });
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if pred.iter().any(|&p| !(p > 0.0)) {
        return Err(NnError::Config("prediction has a non-positive entry".into()));
    }
    let total: f64 = pred.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(NnError::Config(format!("prediction sums to {total}, not 1")));
    }
    Ok(-pred[label].ln())
}

/// Cross-entropy of `softmax(logits)` and its gradient with respect to the logits.
pub fn cross_entropy_with_logits(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(NnError::Index {
            index: label,
            len: logits.len(),
        });
    }
    let lse = crate::tape::log_sum_exp(logits);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_prediction_has_zero_loss() {
        let mut p = vec![1e-300; 4];
        p[2] = 1.0 - 3e-300;
        assert!(cross_entropy(&p, 2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn uniform_over_25_is_ln_25() {
        let p = vec![1.0 / 25.0; 25];
        assert!((cross_entropy(&p, 7).unwrap() - 25f64.ln()).abs() < 1e-12);
        assert!((25f64.ln() - 3.2189).abs() < 1e-4);
    }

    #[test]
    fn three_class_case() {
        // −ln 0.2
        let loss = cross_entropy(&[0.7, 0.2, 0.1], 1).unwrap();
        assert!((loss - 1.609_437_912_434_100_3).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(NnError::Index { .. })));
        assert!(cross_entropy(&[0.5, 0.6], 0).is_err());
        assert!(cross_entropy(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn logit_gradient_is_softmax_minus_onehot() {
        let (loss, g) = cross_entropy_with_logits(&[0.0, 0.0], 0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
    }
}
