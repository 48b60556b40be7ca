//! Reliability sampling of pseudo-labeled test rows.
//!
//! Step one groups test rows by their known-class confidence against a band
//! `[mu - alpha*delta, mu + alpha*delta]` computed from train confidences.
//! Step two keeps a confidently grouped row only when its tentative label
//! agrees with strictly more than half of its `K` nearest neighbours (by
//! Euclidean distance, self excluded, ties broken by lower row index) in the
//! latent feature space.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::Prediction;
use crate::matrix::{squared_distance, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("need at least 2 train confidences, got {0}")]
    TooFewValues(usize),
    #[error("K={k} out of range for {n} test rows (need 1 <= K < n)")]
    KOutOfRange { k: usize, n: usize },
    #[error("latent matrix has {got} rows, grouping has {expected}")]
    RowMismatch { expected: usize, got: usize },
    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub mu: f64,
    pub delta: f64,
    pub alpha: f64,
}

impl ThresholdStats {
    pub fn upper(&self) -> f64 {
        self.mu + self.alpha * self.delta
    }

    pub fn lower(&self) -> f64 {
        self.mu - self.alpha * self.delta
    }
}

/// Population mean and standard deviation of train confidences.
pub fn compute_threshold_stats(
    confidences: &[f64],
    alpha: f64,
) -> Result<ThresholdStats, SamplingError> {
    if confidences.len() < 2 {
        return Err(SamplingError::TooFewValues(confidences.len()));
    }
    if !(alpha > 0.0) {
        return Err(SamplingError::BadAlpha(alpha));
    }
    let n = confidences.len() as f64;
    let mu = confidences.iter().sum::<f64>() / n;
    let var = confidences.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    Ok(ThresholdStats {
        mu,
        delta: var.sqrt(),
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Known,
    Unknown,
    Undetermined,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Known => "known",
            Group::Unknown => "unknown",
            Group::Undetermined => "undetermined",
        }
    }
}

/// Group tag, tentative label and confidence for every test row.
///
/// Known and undetermined rows carry their argmax known-class label in
/// `1..=c`; unknown rows carry `c + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelGrouping {
    pub groups: Vec<Group>,
    pub tentative: Vec<u32>,
    pub confidence: Vec<f64>,
    pub c: usize,
}

impl PseudoLabelGrouping {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// `(known, unknown, undetermined)` counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        self.groups.iter().fold((0, 0, 0), |(k, u, d), g| match g {
            Group::Known => (k + 1, u, d),
            Group::Unknown => (k, u + 1, d),
            Group::Undetermined => (k, u, d + 1),
        })
    }
}

/// Test rows kept for training, with their pseudo labels. Indices ascend.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectedSubset {
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
}

impl SelectedSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn count_label(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Groups rows given raw confidences and argmax known-class labels.
pub fn group_scores(
    confidence: &[f64],
    known_labels: &[u32],
    stats: &ThresholdStats,
    c: usize,
) -> PseudoLabelGrouping {
    let (upper, lower) = (stats.upper(), stats.lower());
    let unknown = c as u32 + 1;
    let mut groups = Vec::with_capacity(confidence.len());
    let mut tentative = Vec::with_capacity(confidence.len());
    for (&s, &l) in confidence.iter().zip(known_labels) {
        let g = if s > upper {
            Group::Known
        } else if s < lower {
            Group::Unknown
        } else {
            Group::Undetermined
        };
        groups.push(g);
        tentative.push(if g == Group::Unknown { unknown } else { l });
    }
    PseudoLabelGrouping {
        groups,
        tentative,
        confidence: confidence.to_vec(),
        c,
    }
}

/// Threshold grouping of model predictions.
pub fn threshold_grouping(
    preds: &[Prediction],
    stats: &ThresholdStats,
    c: usize,
) -> PseudoLabelGrouping {
    let conf: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    let labels: Vec<u32> = preds.iter().map(|p| p.known_label).collect();
    group_scores(&conf, &labels, stats, c)
}

/// Indices of the `k` nearest rows to `query` (self excluded), ordered by
/// `(distance, index)`.
pub fn nearest_neighbors(latents: &Matrix, query: usize, k: usize) -> Vec<usize> {
    let q = latents.row(query);
    let mut cand: Vec<(f64, usize)> = (0..latents.rows())
        .filter(|&j| j != query)
        .map(|j| (squared_distance(q, latents.row(j)), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Keeps known/unknown-grouped rows whose tentative label agrees with more
/// than `K/2` of their `K` nearest neighbours among all test rows.
pub fn knn_consistency_filter(
    grouping: &PseudoLabelGrouping,
    latents: &Matrix,
    k: usize,
) -> Result<SelectedSubset, SamplingError> {
    let n = grouping.len();
    if latents.rows() != n {
        return Err(SamplingError::RowMismatch {
            expected: n,
            got: latents.rows(),
        });
    }
    if k == 0 || k >= n {
        return Err(SamplingError::KOutOfRange { k, n });
    }
    let mut out = SelectedSubset::default();
    for i in 0..n {
        if grouping.groups[i] == Group::Undetermined {
            continue;
        }
        let label = grouping.tentative[i];
        let agree = nearest_neighbors(latents, i, k)
            .into_iter()
            .filter(|&j| grouping.tentative[j] == label)
            .count();
        if 2 * agree > k {
            out.indices.push(i);
            out.labels.push(label);
        }
    }
    Ok(out)
}

/// Score-space-only selection: every known/unknown-grouped row.
pub fn score_only_selection(grouping: &PseudoLabelGrouping) -> SelectedSubset {
    let mut out = SelectedSubset::default();
    for (i, g) in grouping.groups.iter().enumerate() {
        if *g != Group::Undetermined {
            out.indices.push(i);
            out.labels.push(grouping.tentative[i]);
        }
    }
    out
}

/// Debug dump: `row_id,group,tentative_label,s,selected`.
pub fn write_sampling_csv<W: Write>(
    w: &mut W,
    grouping: &PseudoLabelGrouping,
    selected: &SelectedSubset,
) -> std::io::Result<()> {
    let mut chosen = vec![false; grouping.len()];
    for &i in &selected.indices {
        chosen[i] = true;
    }
    writeln!(w, "row_id,group,tentative_label,s,selected")?;
    for i in 0..grouping.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            i,
            grouping.groups[i].as_str(),
            grouping.tentative[i],
            grouping.confidence[i],
            u8::from(chosen[i])
        )?;
    }
    Ok(())
}
