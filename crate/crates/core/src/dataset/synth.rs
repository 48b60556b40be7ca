//! Synthetic open-set data: Gaussian class clusters, some of which never
//! appear in the training table.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetError, FeatureDataset};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub c_known: usize,
    pub c_unknown: usize,
    pub d: usize,
    /// Rows per class in the train table (known classes) and in the test
    /// table (every class).
    pub per_class_n: usize,
    /// Class means are drawn uniformly from `[-center_scale, center_scale]^d`.
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            c_known: 6,
            c_unknown: 4,
            d: 16,
            per_class_n: 50,
            center_scale: 1.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidConfig(m.to_string()));
        if self.c_known < 2 {
            return bad("c_known must be at least 2");
        }
        if self.c_unknown < 1 {
            return bad("c_unknown must be at least 1");
        }
        if self.per_class_n < 2 {
            return bad("per_class_n must be at least 2");
        }
        if self.d == 0 {
            return bad("d must be positive");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive and finite");
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return bad("center_scale must be non-negative and finite");
        }
        Ok(())
    }
}

/// Rounds to `f32` precision so that file round-trips are exact.
fn q(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Generates a labeled train table over the known classes and a shuffled test
/// table over all classes. Unknown-origin test rows carry truth `c_known + 1`.
pub fn synth_openset(cfg: &SynthConfig) -> Result<FeatureDataset, DatasetError> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, 0x5e7_0001);
    let total = cfg.c_known + cfg.c_unknown;
    let centers: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            (0..cfg.d)
                .map(|_| rng.random_range(-cfg.center_scale..=cfg.center_scale))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| DatasetError::InvalidConfig(e.to_string()))?;

    let sample = |class: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        centers[class]
            .iter()
            .map(|m| q(m + noise.sample(rng)))
            .collect()
    };

    let mut train: Vec<(Vec<f64>, u32)> = Vec::with_capacity(cfg.c_known * cfg.per_class_n);
    for k in 0..cfg.c_known {
        for _ in 0..cfg.per_class_n {
            train.push((sample(k, &mut rng), k as u32 + 1));
        }
    }
    let unknown = cfg.c_known as u32 + 1;
    let mut test: Vec<(Vec<f64>, u32)> = Vec::with_capacity(total * cfg.per_class_n);
    for k in 0..total {
        let truth = if k < cfg.c_known {
            k as u32 + 1
        } else {
            unknown
        };
        for _ in 0..cfg.per_class_n {
            test.push((sample(k, &mut rng), truth));
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);

    let (train_rows, train_labels): (Vec<_>, Vec<_>) = train.into_iter().unzip();
    let (test_rows, test_truth): (Vec<_>, Vec<_>) = test.into_iter().unzip();
    FeatureDataset::new(
        Matrix::from_rows(&train_rows).expect("uniform width"),
        train_labels,
        Matrix::from_rows(&test_rows).expect("uniform width"),
        Some(test_truth),
        cfg.c_known,
    )
}
