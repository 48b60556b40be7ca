//! Softmax and cross-entropy with gradients with respect to logits.

use super::NnError;
use crate::matrix::Matrix;

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(logits)))`, stable.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over rows of `logits` against zero-based class
/// `targets`, and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix), NnError> {
    if logits.rows() != targets.len() {
        return Err(NnError::ShapeMismatch {
            context: "cross-entropy targets",
            expected: logits.rows(),
            got: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let classes = logits.cols();
    let m = targets.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(NnError::TargetOutOfRange { target: t, classes });
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[t];
        let p = softmax(row);
        let g = grad.row_mut(r);
        for (gj, pj) in g.iter_mut().zip(&p) {
            *gj = pj / m;
        }
        g[t] -= 1.0 / m;
    }
    Ok((total / m, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Matrix::zeros(3, 7);
        let (l, _) = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![5.0, 5.0, -5.0]]).unwrap();
        let (_, g) = cross_entropy(&logits, &[2, 0]).unwrap();
        for r in g.iter_rows() {
            assert!(r.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_targets() {
        let logits = Matrix::zeros(1, 2);
        assert_eq!(
            cross_entropy(&logits, &[2]).unwrap_err(),
            NnError::TargetOutOfRange {
                target: 2,
                classes: 2
            }
        );
        assert_eq!(
            cross_entropy(&Matrix::zeros(0, 2), &[]).unwrap_err(),
            NnError::EmptyBatch
        );
    }
}
