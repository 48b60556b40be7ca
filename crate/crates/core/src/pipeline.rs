//! The iterative loop: train `M_0`, then `T` rounds of reliability sampling,
//! feature generation and a `(c+1)`-way baseline update.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{
    train_baseline, BaselineError, BaselineHyper, BaselineModel, HeadInit, Prediction,
};
use crate::dataset::FeatureDataset;
use crate::feature_gan::{
    generate_features, init_gan, train_gan, write_loss_trace_csv, EpochLosses, GanError, GanHyper,
    GanInitHyper, GeneratedSet, Toggles,
};
use crate::matrix::Matrix;
use crate::metrics::{evaluate, EvalResult, MetricsError};
use crate::sampling::{
    compute_threshold_stats, knn_consistency_filter, score_only_selection, threshold_grouping,
    write_sampling_csv, Group, PseudoLabelGrouping, SamplingError, SelectedSubset, ThresholdStats,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which model the update at iteration `t` starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrainFrom {
    /// Warm start from `M_{t-1}`.
    #[default]
    Previous,
    /// Start every update from `M_0`.
    Initial,
}

impl RetrainFrom {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrainFrom::Previous => "previous",
            RetrainFrom::Initial => "initial",
        }
    }
}

impl std::str::FromStr for RetrainFrom {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "previous" => Ok(RetrainFrom::Previous),
            "initial" => Ok(RetrainFrom::Initial),
            _ => Err(format!("expected previous|initial, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// `T`
    pub iterations: usize,
    pub alpha: f64,
    /// Neighbours in the consistency filter.
    pub k: usize,
    pub lambda: f64,
    pub lr_embedder: f64,
    pub lr_head: f64,
    /// Epochs for `M_0` and for every update.
    pub epochs: usize,
    pub batch: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub gan_epochs: usize,
    pub gan_batch: usize,
    pub n_critic: usize,
    pub gan_lr: f64,
    pub noise_dim: usize,
    pub gan_hidden: usize,
    pub clip_bound: f64,
    pub use_dual_space_sampling: bool,
    pub use_d2: bool,
    pub use_c2: bool,
    pub retrain_from: RetrainFrom,
    pub head_init: HeadInit,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            alpha: 2.5,
            k: 10,
            lambda: 0.1,
            lr_embedder: 0.002,
            lr_head: 0.02,
            epochs: 200,
            batch: 32,
            hidden: 128,
            latent_dim: 64,
            gan_epochs: 10,
            gan_batch: 64,
            n_critic: 5,
            gan_lr: 0.02,
            noise_dim: 64,
            gan_hidden: 128,
            clip_bound: 0.01,
            use_dual_space_sampling: true,
            use_d2: true,
            use_c2: true,
            retrain_from: RetrainFrom::Previous,
            head_init: HeadInit::Reinit,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lr_embedder", self.lr_embedder),
            ("lr_head", self.lr_head),
            ("gan_lr", self.gan_lr),
            ("clip_bound", self.clip_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        for (name, v) in [
            ("k", self.k),
            ("batch", self.batch),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("gan_batch", self.gan_batch),
            ("n_critic", self.n_critic),
            ("noise_dim", self.noise_dim),
            ("gan_hidden", self.gan_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }

    fn baseline_hyper(&self, seed_value: u64) -> BaselineHyper {
        BaselineHyper {
            epochs: self.epochs,
            batch: self.batch,
            lr_embedder: self.lr_embedder,
            lr_head: self.lr_head,
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            seed: seed_value,
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            use_d2: self.use_d2,
            use_c2: self.use_c2,
            cls_to_generator: true,
        }
    }

    pub fn sampling_mode(&self) -> &'static str {
        if self.use_dual_space_sampling {
            "dual-space"
        } else {
            "score-only"
        }
    }
}

/// Per-class generation targets that raise every class total (train plus
/// selected) to the largest total. Histograms are indexed by label - 1.
pub fn balance_counts(train_hist: &[usize], selected_hist: &[usize]) -> Vec<usize> {
    let totals: Vec<usize> = train_hist
        .iter()
        .zip(selected_hist)
        .map(|(a, b)| a + b)
        .collect();
    let top = totals.iter().copied().max().unwrap_or(0);
    totals.iter().map(|t| top - t).collect()
}

/// Label histogram over `1..=classes`, indexed by label - 1.
pub fn histogram(labels: &[u32], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &l in labels {
        if let Some(slot) = h.get_mut((l as usize).wrapping_sub(1)) {
            *slot += 1;
        }
    }
    h
}

pub struct UpdateOutput {
    pub model: BaselineModel,
    pub loss_trace: Vec<f64>,
}

/// Retrains `model` as a `(c+1)`-way classifier on train rows, selected test
/// rows (both through the embedder) and generated latent rows (head only).
pub fn baseline_update(
    model: &BaselineModel,
    ds: &FeatureDataset,
    selected: &SelectedSubset,
    generated: &GeneratedSet,
    hyper: &BaselineHyper,
    head_init: HeadInit,
) -> Result<UpdateOutput, BaselineError> {
    let k = ds.c() + 1;
    let mut next = model.with_head_width(k, head_init, seed::derive(hyper.seed, 0x0b5e))?;
    let sel = ds.test_features().select_rows(&selected.indices);
    let raw = Matrix::vstack(&[ds.train_features(), &sel], ds.d()).expect("same width");
    let mut labels = ds.train_labels().to_vec();
    labels.extend_from_slice(&selected.labels);
    let loss_trace = next.fit(&raw, &labels, &generated.features, &generated.labels, hyper)?;
    Ok(UpdateOutput {
        model: next,
        loss_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialReport {
    pub train_acc: f64,
    pub metrics: Option<EvalResult>,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub t: usize,
    pub threshold: ThresholdStats,
    pub n_known: usize,
    pub n_unknown: usize,
    pub n_undetermined: usize,
    pub n_selected: usize,
    pub selected_per_class: Vec<usize>,
    /// Fraction of selected rows whose pseudo label equals the truth.
    pub selected_label_precision: Option<f64>,
    pub generated_per_class: Vec<usize>,
    pub n_generated: usize,
    pub sampling_mode: String,
    pub gan_skipped: bool,
    pub metrics: Option<EvalResult>,
    pub baseline_loss_trace: Vec<f64>,
    pub gan_loss_trace: Vec<EpochLosses>,
}

/// Per-iteration data behind the debug CSVs.
#[derive(Debug, Clone)]
pub struct IterationDebug {
    pub grouping: PseudoLabelGrouping,
    pub selected: SelectedSubset,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial: InitialReport,
    pub initial_predictions: Vec<Prediction>,
    pub reports: Vec<IterationReport>,
    pub debug: Vec<IterationDebug>,
    /// `P_T`
    pub predictions: Vec<Prediction>,
    pub model: BaselineModel,
}

fn metrics_for(
    preds: &[Prediction],
    ds: &FeatureDataset,
) -> Result<Option<EvalResult>, MetricsError> {
    let Some(truth) = ds.test_truth() else {
        return Ok(None);
    };
    let labels: Vec<u32> = preds.iter().map(|p| p.label).collect();
    let conf: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    evaluate(&labels, &conf, truth, ds.c()).map(Some)
}

fn rows_of(preds: &[Prediction], cols: usize) -> Matrix {
    let data = preds
        .iter()
        .flat_map(|p| p.latent.iter().copied())
        .collect();
    Matrix::from_vec(preds.len(), cols, data).expect("uniform latent width")
}

/// Runs the full loop. Every random stream is derived from `cfg.seed`.
pub fn run_it_osr(ds: &FeatureDataset, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    ds.validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let c = ds.c();
    let fit0 = train_baseline(ds, &cfg.baseline_hyper(seed::derive(cfg.seed, 0x100)))?;
    let m0 = fit0.model;
    let p0 = m0.predict(ds.test_features())?;
    let initial = InitialReport {
        train_acc: fit0.train_acc,
        metrics: metrics_for(&p0, ds)?,
        loss_trace: fit0.loss_trace,
    };

    let mut prev = m0.clone();
    let mut preds = p0.clone();
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut debug = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        let tag = t as u64;
        // Reliability sampling against M_{t-1}.
        let train_conf: Vec<f64> = prev
            .predict(ds.train_features())?
            .iter()
            .map(|p| p.confidence)
            .collect();
        let stats = compute_threshold_stats(&train_conf, cfg.alpha)?;
        let grouping = threshold_grouping(&preds, &stats, c);
        let selected = if cfg.use_dual_space_sampling {
            let latents = if t == 1 {
                ds.test_features().clone()
            } else {
                rows_of(&preds, prev.latent_dim())
            };
            knn_consistency_filter(&grouping, &latents, cfg.k)?
        } else {
            score_only_selection(&grouping)
        };
        let (n_known, n_unknown, n_undetermined) = grouping.counts();
        let selected_hist = histogram(&selected.labels, c + 1);

        let base = match cfg.retrain_from {
            RetrainFrom::Previous => &prev,
            RetrainFrom::Initial => &m0,
        };

        // Feature generation in the latent space of the model being updated.
        let gan_skipped = selected_hist[c] == 0;
        let (generated, gan_trace) = if gan_skipped {
            (GeneratedSet::empty(base.latent_dim()), Vec::new())
        } else {
            let sel_rows = ds.test_features().select_rows(&selected.indices);
            let raw =
                Matrix::vstack(&[ds.train_features(), &sel_rows], ds.d()).expect("same width");
            let real = base.embed(&raw)?;
            let mut real_labels = ds.train_labels().to_vec();
            real_labels.extend_from_slice(&selected.labels);
            let params = init_gan(
                base.latent_dim(),
                c,
                &GanInitHyper {
                    noise_dim: cfg.noise_dim,
                    hidden: cfg.gan_hidden,
                    lambda: cfg.lambda,
                    clip_bound: cfg.clip_bound,
                    seed: seed::derive(cfg.seed, 0x200 + tag),
                },
            )?;
            let trained = train_gan(
                &real,
                &real_labels,
                params,
                &GanHyper {
                    epochs: cfg.gan_epochs,
                    batch: cfg.gan_batch,
                    n_critic: cfg.n_critic,
                    lr: cfg.gan_lr,
                    toggles: cfg.toggles(),
                    seed: seed::derive(cfg.seed, 0x300 + tag),
                },
            )?;
            let targets = balance_counts(&histogram(ds.train_labels(), c + 1), &selected_hist);
            let generated = generate_features(
                &trained.params,
                &targets,
                seed::derive(cfg.seed, 0x400 + tag),
            )?;
            (generated, trained.trace)
        };

        let update = baseline_update(
            base,
            ds,
            &selected,
            &generated,
            &cfg.baseline_hyper(seed::derive(cfg.seed, 0x500 + tag)),
            cfg.head_init,
        )?;
        preds = update.model.predict(ds.test_features())?;
        prev = update.model;

        let precision = ds
            .test_truth()
            .filter(|_| !selected.is_empty())
            .map(|truth| {
                let hits = selected
                    .indices
                    .iter()
                    .zip(&selected.labels)
                    .filter(|(&i, &l)| truth[i] == l)
                    .count();
                hits as f64 / selected.len() as f64
            });
        reports.push(IterationReport {
            t,
            threshold: stats,
            n_known,
            n_unknown,
            n_undetermined,
            n_selected: selected.len(),
            selected_per_class: selected_hist,
            selected_label_precision: precision,
            generated_per_class: histogram(&generated.labels, c + 1),
            n_generated: generated.len(),
            sampling_mode: cfg.sampling_mode().to_string(),
            gan_skipped,
            metrics: metrics_for(&preds, ds)?,
            baseline_loss_trace: update.loss_trace,
            gan_loss_trace: gan_trace,
        });
        debug.push(IterationDebug { grouping, selected });
    }

    Ok(RunOutput {
        initial,
        initial_predictions: p0,
        reports,
        debug,
        predictions: preds,
        model: prev,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a PipelineConfig,
    initial: &'a InitialReport,
    iterations: &'a [IterationReport],
    final_metrics: Option<&'a EvalResult>,
}

impl RunOutput {
    pub fn final_metrics(&self) -> Option<&EvalResult> {
        self.reports.last().and_then(|r| r.metrics.as_ref())
    }

    pub fn report_json(&self, cfg: &PipelineConfig) -> String {
        let file = ReportFile {
            config: cfg,
            initial: &self.initial,
            iterations: &self.reports,
            final_metrics: self.final_metrics(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("report serialises");
        s.push('\n');
        s
    }

    /// Writes `report.json`, `predictions.csv` and per-iteration
    /// `iter{t}_sampling.csv` / `iter{t}_gan_loss.csv` into `dir`.
    pub fn write_outputs(&self, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| PipelineError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let p = dir.join("report.json");
        fs::write(&p, self.report_json(cfg)).map_err(io(&p))?;
        let p = dir.join("predictions.csv");
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &self.predictions).map_err(io(&p))?;
        fs::write(&p, buf).map_err(io(&p))?;
        for (r, d) in self.reports.iter().zip(&self.debug) {
            let p = dir.join(format!("iter{}_sampling.csv", r.t));
            let mut buf = Vec::new();
            write_sampling_csv(&mut buf, &d.grouping, &d.selected).map_err(io(&p))?;
            fs::write(&p, buf).map_err(io(&p))?;
            let p = dir.join(format!("iter{}_gan_loss.csv", r.t));
            let mut buf = Vec::new();
            write_loss_trace_csv(&mut buf, &r.gan_loss_trace).map_err(io(&p))?;
            fs::write(&p, buf).map_err(io(&p))?;
        }
        Ok(())
    }
}

/// `row_id,predicted_label,confidence`
pub fn write_predictions_csv<W: Write>(w: &mut W, preds: &[Prediction]) -> std::io::Result<()> {
    writeln!(w, "row_id,predicted_label,confidence")?;
    for (i, p) in preds.iter().enumerate() {
        writeln!(w, "{},{},{}", i, p.label, p.confidence)?;
    }
    Ok(())
}

/// Counts of each group, for reports outside the pipeline.
pub fn group_counts(groups: &[Group]) -> (usize, usize, usize) {
    let k = groups.iter().filter(|&&g| g == Group::Known).count();
    let u = groups.iter().filter(|&&g| g == Group::Unknown).count();
    (k, u, groups.len() - k - u)
}
