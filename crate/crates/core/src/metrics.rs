//! Open-set evaluation: AUROC of the known-class confidence for known vs
//! unknown detection, top-1 accuracy on known-class rows, and macro-F1 over
//! all `c + 1` classes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUROC needs both known and unknown rows (known={known}, unknown={unknown})")]
    SingleClass { known: usize, unknown: usize },
    #[error("no rows with known-class truth")]
    NoKnownRows,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("label {label} outside 1..={classes}")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("empty input")]
    Empty,
}

/// Area under the ROC curve via the Mann-Whitney rank statistic.
///
/// Equals the probability that a random known row scores higher than a random
/// unknown row, ties counted one half.
pub fn auroc(scores: &[f64], is_known: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != is_known.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), is_known.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let n_pos = is_known.iter().filter(|&&k| k).count();
    let n_neg = is_known.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass {
            known: n_pos,
            unknown: n_neg,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based midranks of the known rows.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| is_known[k]).count();
        rank_sum += midrank * pos_in_tie as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of known-truth rows (`truth <= c`) whose prediction matches.
pub fn top1_acc(predicted: &[u32], truth: &[u32], c: usize) -> Result<f64, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), truth.len()));
    }
    let (hits, total) = predicted
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t >= 1 && t as usize <= c)
        .fold((0usize, 0usize), |(h, n), (p, t)| {
            (h + usize::from(p == t), n + 1)
        });
    if total == 0 {
        return Err(MetricsError::NoKnownRows);
    }
    Ok(hits as f64 / total as f64)
}

/// `classes x classes` confusion matrix, rows indexed by truth and columns by
/// prediction (both 1-based labels).
pub fn confusion(
    predicted: &[u32],
    truth: &[u32],
    classes: usize,
) -> Result<Vec<Vec<u64>>, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), truth.len()));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label == 0 || label as usize > classes {
                return Err(MetricsError::LabelOutOfRange { label, classes });
            }
        }
        m[t as usize - 1][p as usize - 1] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub value: f64,
    pub per_class: Vec<f64>,
    /// Classes with neither truth rows nor predictions; scored 0.
    pub undefined: Vec<u32>,
}

/// Unweighted mean of per-class F1 over labels `1..=classes`. A class with
/// `P + R = 0` scores 0.
pub fn macro_f1_detailed(
    predicted: &[u32],
    truth: &[u32],
    classes: usize,
) -> Result<MacroF1, MetricsError> {
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let cm = confusion(predicted, truth, classes)?;
    let mut per_class = Vec::with_capacity(classes);
    let mut undefined = Vec::new();
    for k in 0..classes {
        let tp = cm[k][k] as f64;
        let truth_k: u64 = cm[k].iter().sum();
        let pred_k: u64 = cm.iter().map(|r| r[k]).sum();
        if truth_k == 0 && pred_k == 0 {
            undefined.push(k as u32 + 1);
        }
        let precision = if pred_k > 0 { tp / pred_k as f64 } else { 0.0 };
        let recall = if truth_k > 0 {
            tp / truth_k as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(f1);
    }
    let value = per_class.iter().sum::<f64>() / classes as f64;
    Ok(MacroF1 {
        value,
        per_class,
        undefined,
    })
}

pub fn macro_f1(predicted: &[u32], truth: &[u32], classes: usize) -> Result<f64, MetricsError> {
    macro_f1_detailed(predicted, truth, classes).map(|m| m.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` when the truth contains only one of known/unknown.
    pub auroc: Option<f64>,
    /// `None` when no row has known-class truth.
    pub acc: Option<f64>,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n_known: usize,
    pub n_unknown: usize,
    pub undefined_f1_classes: Vec<u32>,
}

/// Full evaluation of `(c+1)`-way predictions and known-class confidences.
pub fn evaluate(
    predicted: &[u32],
    confidence: &[f64],
    truth: &[u32],
    c: usize,
) -> Result<EvalResult, MetricsError> {
    if confidence.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(confidence.len(), truth.len()));
    }
    let is_known: Vec<bool> = truth.iter().map(|&t| t as usize <= c).collect();
    let n_known = is_known.iter().filter(|&&k| k).count();
    let n_unknown = truth.len() - n_known;
    let auroc = match auroc(confidence, &is_known) {
        Ok(v) => Some(v),
        Err(MetricsError::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };
    let acc = match top1_acc(predicted, truth, c) {
        Ok(v) => Some(v),
        Err(MetricsError::NoKnownRows) => None,
        Err(e) => return Err(e),
    };
    let f1 = macro_f1_detailed(predicted, truth, c + 1)?;
    Ok(EvalResult {
        auroc,
        acc,
        macro_f1: f1.value,
        confusion: confusion(predicted, truth, c + 1)?,
        n_known,
        n_unknown,
        undefined_f1_classes: f1.undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(scores: &[f64], is_known: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &ki) in is_known.iter().enumerate() {
            for (j, &kj) in is_known.iter().enumerate() {
                if ki && !kj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn worked_auroc_example() {
        let s = [0.9, 0.8, 0.4, 0.3];
        let k = [true, false, true, false];
        assert_eq!(pairwise(&s, &k), 0.75);
        assert_eq!(auroc(&s, &k).unwrap(), 0.75);
    }

    #[test]
    fn auroc_edge_cases() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(MetricsError::SingleClass { .. })
        ));
        assert!(matches!(
            auroc(&[f64::NAN, 0.2], &[true, false]),
            Err(MetricsError::NonFinite(0))
        ));
    }

    #[test]
    fn accuracy_counts_known_rows_only() {
        assert_eq!(top1_acc(&[1, 2, 3], &[1, 2, 4], 3).unwrap(), 1.0);
        assert_eq!(top1_acc(&[2, 1, 1], &[1, 2, 4], 3).unwrap(), 0.0);
        assert_eq!(top1_acc(&[1, 1, 4], &[1, 2, 4], 3).unwrap(), 0.5);
        assert_eq!(top1_acc(&[4], &[4], 3), Err(MetricsError::NoKnownRows));
    }

    #[test]
    fn macro_f1_worked_example() {
        let v = macro_f1(&[1, 2, 2, 3], &[1, 1, 2, 3], 3).unwrap();
        assert!((v - 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[1, 2, 3], &[1, 2, 3], 3).unwrap(), 1.0);
        assert!(macro_f1(&[1, 1, 1], &[1, 2, 3], 3).unwrap() < 1.0);
    }

    #[test]
    fn undefined_classes_are_flagged() {
        let m = macro_f1_detailed(&[1, 2], &[1, 2], 3).unwrap();
        assert_eq!(m.undefined, vec![3]);
        assert!((m.value - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_confusion_rows_match_truth_counts() {
        let truth = [1, 1, 2, 3, 3, 3];
        let pred = [1, 3, 2, 3, 1, 3];
        let conf = [0.9, 0.5, 0.8, 0.2, 0.6, 0.1];
        let r = evaluate(&pred, &conf, &truth, 2).unwrap();
        assert_eq!(r.n_known, 3);
        assert_eq!(r.n_unknown, 3);
        let sums: Vec<u64> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(sums, vec![2, 1, 3]);
        assert!((r.acc.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }
}
