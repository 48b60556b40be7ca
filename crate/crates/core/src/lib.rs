//! Iterative transductive open-set recognition over precomputed feature tables.
//!
//! The crate is organised bottom-up:
//!
//! * [`matrix`] and [`nn`]: a small dense-network engine with manual backprop.
//! * [`dataset`]: feature tables, their text/binary file encodings and a
//!   synthetic open-set generator.
//! * [`baseline`]: embedder plus perceptron head trained with cross-entropy.
//! * [`sampling`]: threshold grouping of test confidences and the latent-space
//!   KNN consistency filter.
//! * [`feature_gan`]: the conditional dual-adversarial feature generator.
//! * [`pipeline`]: the iterative sample / generate / retrain loop.
//! * [`metrics`]: AUROC, known-class accuracy and macro-F1.
//! * [`gradcheck`]: finite-difference checks used by tests and the CLI.

pub mod baseline;
pub mod dataset;
pub mod feature_gan;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampling;
mod seed;

pub use baseline::{BaselineHyper, BaselineModel, Prediction};
pub use dataset::{Encoding, FeatureDataset, SynthConfig};
pub use feature_gan::{GanHyper, GanParams, GeneratedSet};
pub use matrix::Matrix;
pub use metrics::EvalResult;
pub use nn::{DenseNet, GradientSet};
pub use pipeline::{IterationReport, PipelineConfig, RunOutput};
pub use sampling::{Group, PseudoLabelGrouping, SelectedSubset, ThresholdStats};
