//! Feature tables: the labeled training table and the unlabeled test table.
//!
//! Features are held as `f64` in memory but every value that passes through a
//! file is stored at `f32` precision, so datasets built by [`synth_openset`] or
//! read from disk round-trip bitwise.

mod format;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::matrix::Matrix;

pub use format::{read_table, write_table, Encoding, FeatureTable, BINARY_MAGIC, TEXT_MAGIC};
pub use synth::{synth_openset, SynthConfig};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("label {label} out of range at row {row} (allowed {allowed})")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        allowed: String,
    },
    #[error("malformed row {row}: {detail}")]
    MalformedRow { row: usize, detail: String },
    #[error("class count mismatch: train file says c={train}, test file says c={test}")]
    ClassCountMismatch { train: usize, test: usize },
    #[error("known class {0} has no training rows")]
    EmptyClass(u32),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

/// Labeled train table plus unlabeled test table over `c` known classes.
///
/// Train labels are in `1..=c`. Test truth, when present, is in `1..=c+1`
/// where `c+1` marks unknown-class rows; only evaluation reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    train_features: Matrix,
    train_labels: Vec<u32>,
    test_features: Matrix,
    test_truth: Option<Vec<u32>>,
    c: usize,
}

impl FeatureDataset {
    pub fn new(
        train_features: Matrix,
        train_labels: Vec<u32>,
        test_features: Matrix,
        test_truth: Option<Vec<u32>>,
        c: usize,
    ) -> Result<Self, DatasetError> {
        let ds = Self {
            train_features,
            train_labels,
            test_features,
            test_truth,
            c,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.c == 0 {
            return Err(DatasetError::Invalid("c must be at least 1".into()));
        }
        let d = self.train_features.cols();
        if self.test_features.cols() != d && self.test_features.rows() > 0 {
            return Err(DatasetError::DimensionMismatch(format!(
                "train d={d}, test d={}",
                self.test_features.cols()
            )));
        }
        if self.train_labels.len() != self.train_features.rows() {
            return Err(DatasetError::Invalid(format!(
                "{} train rows but {} labels",
                self.train_features.rows(),
                self.train_labels.len()
            )));
        }
        if let Some(t) = &self.test_truth {
            if t.len() != self.test_features.rows() {
                return Err(DatasetError::Invalid(format!(
                    "{} test rows but {} truth labels",
                    self.test_features.rows(),
                    t.len()
                )));
            }
            for (row, &l) in t.iter().enumerate() {
                if l == 0 || l as usize > self.c + 1 {
                    return Err(DatasetError::LabelOutOfRange {
                        row,
                        label: l as i64,
                        allowed: format!("1..={}", self.c + 1),
                    });
                }
            }
        }
        let mut counts = vec![0usize; self.c];
        for (row, &l) in self.train_labels.iter().enumerate() {
            if l == 0 || l as usize > self.c {
                return Err(DatasetError::LabelOutOfRange {
                    row,
                    label: l as i64,
                    allowed: format!("1..={}", self.c),
                });
            }
            counts[l as usize - 1] += 1;
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(DatasetError::EmptyClass(k as u32 + 1));
        }
        for m in [&self.train_features, &self.test_features] {
            for (row, r) in m.iter_rows().enumerate() {
                if let Some(col) = r.iter().position(|v| !v.is_finite()) {
                    return Err(DatasetError::NonFinite { row, col });
                }
            }
        }
        Ok(())
    }

    pub fn train_features(&self) -> &Matrix {
        &self.train_features
    }

    pub fn train_labels(&self) -> &[u32] {
        &self.train_labels
    }

    pub fn test_features(&self) -> &Matrix {
        &self.test_features
    }

    pub fn test_truth(&self) -> Option<&[u32]> {
        self.test_truth.as_deref()
    }

    /// Number of known classes.
    pub fn c(&self) -> usize {
        self.c
    }

    /// Feature dimension.
    pub fn d(&self) -> usize {
        self.train_features.cols()
    }

    pub fn n_train(&self) -> usize {
        self.train_features.rows()
    }

    pub fn n_test(&self) -> usize {
        self.test_features.rows()
    }

    /// Copy of the dataset with test truth removed.
    pub fn without_truth(&self) -> Self {
        Self {
            test_truth: None,
            ..self.clone()
        }
    }
}

/// Loads a dataset from a train table and a test table, in either encoding.
pub fn load_dataset(
    train_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
) -> Result<FeatureDataset, DatasetError> {
    let train = read_table(train_path.as_ref())?;
    let test = read_table(test_path.as_ref())?;
    if train.c != test.c {
        return Err(DatasetError::ClassCountMismatch {
            train: train.c,
            test: test.c,
        });
    }
    if train.features.cols() != test.features.cols() {
        return Err(DatasetError::DimensionMismatch(format!(
            "train file d={}, test file d={}",
            train.features.cols(),
            test.features.cols()
        )));
    }
    if let Some(row) = test.labels.iter().position(|&l| l != 0) {
        return Err(DatasetError::LabelOutOfRange {
            row,
            label: test.labels[row] as i64,
            allowed: "0 (unlabeled test row)".into(),
        });
    }
    let mut train_labels = Vec::with_capacity(train.labels.len());
    for (row, &l) in train.labels.iter().enumerate() {
        if l < 1 || l as usize > train.c {
            return Err(DatasetError::LabelOutOfRange {
                row,
                label: l as i64,
                allowed: format!("1..={}", train.c),
            });
        }
        train_labels.push(l as u32);
    }
    let test_truth = match test.truth {
        Some(t) => {
            let mut out = Vec::with_capacity(t.len());
            for (row, &l) in t.iter().enumerate() {
                if l < 1 || l as usize > test.c + 1 {
                    return Err(DatasetError::LabelOutOfRange {
                        row,
                        label: l as i64,
                        allowed: format!("1..={}", test.c + 1),
                    });
                }
                out.push(l as u32);
            }
            Some(out)
        }
        None => None,
    };
    FeatureDataset::new(
        train.features,
        train_labels,
        test.features,
        test_truth,
        train.c,
    )
}

/// Writes the dataset as a train table and a test table.
pub fn save_dataset(
    ds: &FeatureDataset,
    train_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
    encoding: Encoding,
) -> Result<(), DatasetError> {
    ds.validate()?;
    let train = FeatureTable {
        features: ds.train_features.clone(),
        labels: ds.train_labels.iter().map(|&l| l as i32).collect(),
        truth: None,
        c: ds.c,
    };
    let test = FeatureTable {
        features: ds.test_features.clone(),
        labels: vec![0; ds.n_test()],
        truth: ds
            .test_truth
            .as_ref()
            .map(|t| t.iter().map(|&l| l as i32).collect()),
        c: ds.c,
    };
    write_table(train_path.as_ref(), &train, encoding)?;
    write_table(test_path.as_ref(), &test, encoding)
}
