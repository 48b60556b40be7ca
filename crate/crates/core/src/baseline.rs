//! Inductive baseline: a trainable embedder over input features followed by a
//! three-layer perceptron head, trained with cross-entropy.
//!
//! The head emits `k` logits, `k = c` for the initial model and `k = c + 1`
//! once the unknown class has been added. The embedder output is the latent
//! feature space; the head's softmax is the score output space.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureDataset;
use crate::matrix::Matrix;
use crate::nn::loss::{cross_entropy, softmax};
use crate::nn::{DenseLayer, DenseNet, GradientSet, NnError};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("need at least 2 known classes, got {0}")]
    TooFewClasses(usize),
    #[error("no training rows")]
    EmptyTrain,
    #[error("label {label} outside 1..={k}")]
    LabelOutOfRange { label: u32, k: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr_embedder: f64,
    pub lr_head: f64,
    /// Width of the hidden layers of embedder and head.
    pub hidden: usize,
    /// Latent (embedder output) dimension.
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for BaselineHyper {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 32,
            lr_embedder: 0.002,
            lr_head: 0.02,
            hidden: 128,
            latent_dim: 64,
            seed: 0,
        }
    }
}

/// How the head is prepared when its output width changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInit {
    /// Fresh seeded head at the new width.
    #[default]
    Reinit,
    /// Keep the trained head; existing output units are copied and new ones
    /// are freshly initialised.
    FineTune,
}

impl HeadInit {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadInit::Reinit => "reinit",
            HeadInit::FineTune => "fine-tune",
        }
    }
}

impl std::str::FromStr for HeadInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reinit" => Ok(HeadInit::Reinit),
            "fine-tune" => Ok(HeadInit::FineTune),
            _ => Err(format!("expected reinit|fine-tune, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub embedder: DenseNet,
    pub head: DenseNet,
    c: usize,
}

/// One row of model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Softmax over the `k` head outputs.
    pub scores: Vec<f64>,
    /// 1-based argmax over all `k` outputs.
    pub label: u32,
    /// Maximum softmax probability over the `c` known-class outputs.
    pub confidence: f64,
    /// 1-based argmax over the `c` known-class outputs.
    pub known_label: u32,
    pub latent: Vec<f64>,
}

/// Result of [`train_baseline`].
#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub model: BaselineModel,
    pub train_acc: f64,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Gradients of the mean cross-entropy over one mixed batch.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss: f64,
    /// `None` when the batch has no raw-feature rows.
    pub embedder: Option<GradientSet>,
    pub head: GradientSet,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl BaselineModel {
    /// Fresh model with an `input_dim -> hidden -> latent_dim` embedder and a
    /// `latent_dim -> hidden -> hidden -> k` head.
    pub fn init(
        input_dim: usize,
        c: usize,
        k: usize,
        hyper: &BaselineHyper,
    ) -> Result<Self, BaselineError> {
        if c < 2 {
            return Err(BaselineError::TooFewClasses(c));
        }
        let mut rng = seed::rng(hyper.seed, 0xba5e_0001);
        let embedder = DenseNet::mlp(&[input_dim, hyper.hidden, hyper.latent_dim], &mut rng)?;
        let head = DenseNet::three_layer(hyper.latent_dim, hyper.hidden, k, &mut rng)?;
        Ok(Self { embedder, head, c })
    }

    pub fn from_parts(embedder: DenseNet, head: DenseNet, c: usize) -> Result<Self, BaselineError> {
        if embedder.output_dim() != head.input_dim() {
            return Err(NnError::ShapeMismatch {
                context: "embedder/head",
                expected: embedder.output_dim(),
                got: head.input_dim(),
            }
            .into());
        }
        if c < 2 {
            return Err(BaselineError::TooFewClasses(c));
        }
        let k = head.output_dim();
        if k != c && k != c + 1 {
            return Err(NnError::ShapeMismatch {
                context: "head width",
                expected: c + 1,
                got: k,
            }
            .into());
        }
        Ok(Self { embedder, head, c })
    }

    /// Known-class count.
    pub fn c(&self) -> usize {
        self.c
    }

    /// Output classes of the head.
    pub fn k(&self) -> usize {
        self.head.output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.embedder.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.embedder.input_dim()
    }

    /// Same embedder with the head resized to `k` outputs.
    pub fn with_head_width(
        &self,
        k: usize,
        init: HeadInit,
        seed_value: u64,
    ) -> Result<Self, BaselineError> {
        let mut rng = seed::rng(seed_value, 0xba5e_0002);
        let fresh = DenseNet::three_layer(
            self.latent_dim(),
            self.head.layers()[0].out_dim(),
            k,
            &mut rng,
        )?;
        let head = match init {
            HeadInit::Reinit => fresh,
            HeadInit::FineTune => {
                let mut layers: Vec<DenseLayer> = self.head.layers().to_vec();
                let last = layers.last_mut().expect("non-empty");
                let new_last = fresh.layers().last().expect("non-empty");
                let keep = last.out_dim().min(k);
                let mut weight = new_last.weight.clone();
                let mut bias = new_last.bias.clone();
                for r in 0..weight.rows() {
                    for j in 0..keep {
                        weight.set(r, j, last.weight.get(r, j));
                    }
                }
                bias[..keep].copy_from_slice(&last.bias[..keep]);
                last.weight = weight;
                last.bias = bias;
                DenseNet::from_layers(layers)?
            }
        };
        Self::from_parts(self.embedder.clone(), head, self.c)
    }

    /// Embedder output for each row.
    pub fn embed(&self, features: &Matrix) -> Result<Matrix, BaselineError> {
        Ok(self.embedder.infer(features)?)
    }

    /// Predictions for rows of raw input features.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<Prediction>, BaselineError> {
        let latent = self.embed(features)?;
        let logits = self.head.infer(&latent)?;
        Ok((0..features.rows())
            .map(|r| self.prediction_from_logits(logits.row(r), latent.row(r).to_vec()))
            .collect())
    }

    /// Predictions for rows already in latent space.
    pub fn predict_latent(&self, latent: &Matrix) -> Result<Vec<Prediction>, BaselineError> {
        let logits = self.head.infer(latent)?;
        Ok((0..latent.rows())
            .map(|r| self.prediction_from_logits(logits.row(r), latent.row(r).to_vec()))
            .collect())
    }

    fn prediction_from_logits(&self, logits: &[f64], latent: Vec<f64>) -> Prediction {
        let scores = softmax(logits);
        let known = &scores[..self.c];
        let known_idx = argmax(known);
        Prediction {
            label: argmax(&scores) as u32 + 1,
            confidence: known[known_idx],
            known_label: known_idx as u32 + 1,
            scores,
            latent,
        }
    }

    fn targets(&self, labels: &[u32]) -> Result<Vec<usize>, BaselineError> {
        let k = self.k();
        labels
            .iter()
            .map(|&l| {
                if l == 0 || l as usize > k {
                    Err(BaselineError::LabelOutOfRange { label: l, k })
                } else {
                    Ok(l as usize - 1)
                }
            })
            .collect()
    }

    fn head_input(
        &self,
        raw: &Matrix,
        latent: &Matrix,
    ) -> Result<(Matrix, Option<crate::nn::Tape>), BaselineError> {
        let (emb, tape) = if raw.rows() > 0 {
            let (e, t) = self.embedder.forward(raw)?;
            (e, Some(t))
        } else {
            (Matrix::zeros(0, self.latent_dim()), None)
        };
        let input =
            Matrix::vstack(&[&emb, latent], self.latent_dim()).ok_or(NnError::ShapeMismatch {
                context: "latent rows",
                expected: self.latent_dim(),
                got: latent.cols(),
            })?;
        Ok((input, tape))
    }

    /// Mean cross-entropy over raw rows (through the embedder) followed by
    /// latent rows (head only). Labels are 1-based. Also returns the ReLU
    /// pattern of the traced computation.
    pub fn batch_loss(
        &self,
        raw: &Matrix,
        raw_labels: &[u32],
        latent: &Matrix,
        latent_labels: &[u32],
    ) -> Result<(f64, Vec<bool>), BaselineError> {
        let mut targets = self.targets(raw_labels)?;
        targets.extend(self.targets(latent_labels)?);
        let (input, etape) = self.head_input(raw, latent)?;
        let (logits, htape) = self.head.forward(&input)?;
        let (loss, _) = cross_entropy(&logits, &targets)?;
        let mut pattern = etape.map(|t| t.relu_pattern()).unwrap_or_default();
        pattern.extend(htape.relu_pattern());
        Ok((loss, pattern))
    }

    /// Gradients of [`BaselineModel::batch_loss`].
    pub fn batch_gradients(
        &self,
        raw: &Matrix,
        raw_labels: &[u32],
        latent: &Matrix,
        latent_labels: &[u32],
    ) -> Result<BatchGrads, BaselineError> {
        let mut targets = self.targets(raw_labels)?;
        targets.extend(self.targets(latent_labels)?);
        let (input, etape) = self.head_input(raw, latent)?;
        let (logits, htape) = self.head.forward(&input)?;
        let (loss, dlogits) = cross_entropy(&logits, &targets)?;
        let (head, dinput) = self.head.backward_with_input(&htape, &dlogits)?;
        let embedder = match etape {
            Some(t) => {
                let idx: Vec<usize> = (0..raw.rows()).collect();
                let demb = dinput.select_rows(&idx);
                Some(self.embedder.backward(&t, &demb)?)
            }
            None => None,
        };
        Ok(BatchGrads {
            loss,
            embedder,
            head,
        })
    }

    /// Mini-batch SGD over the union of raw rows and latent rows, for
    /// `hyper.epochs` epochs. Returns the mean loss per epoch.
    pub fn fit(
        &mut self,
        raw: &Matrix,
        raw_labels: &[u32],
        latent: &Matrix,
        latent_labels: &[u32],
        hyper: &BaselineHyper,
    ) -> Result<Vec<f64>, BaselineError> {
        let n_raw = raw.rows();
        let n = n_raw + latent.rows();
        if n == 0 {
            return Err(BaselineError::EmptyTrain);
        }
        self.targets(raw_labels)?;
        self.targets(latent_labels)?;
        let batch = hyper.batch.max(1);
        let mut rng = seed::rng(hyper.seed, 0xba5e_0003);
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(hyper.epochs);
        for _ in 0..hyper.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let raw_idx: Vec<usize> = chunk.iter().copied().filter(|&i| i < n_raw).collect();
                let lat_idx: Vec<usize> = chunk
                    .iter()
                    .filter(|&&i| i >= n_raw)
                    .map(|&i| i - n_raw)
                    .collect();
                let rb = raw.select_rows(&raw_idx);
                let rl: Vec<u32> = raw_idx.iter().map(|&i| raw_labels[i]).collect();
                let lb = latent.select_rows(&lat_idx);
                let ll: Vec<u32> = lat_idx.iter().map(|&i| latent_labels[i]).collect();
                let g = self.batch_gradients(&rb, &rl, &lb, &ll)?;
                if let Some(ge) = &g.embedder {
                    self.embedder.sgd_step(ge, hyper.lr_embedder)?;
                }
                self.head.sgd_step(&g.head, hyper.lr_head)?;
                total += g.loss * chunk.len() as f64;
            }
            trace.push(total / n as f64);
        }
        Ok(trace)
    }

    /// Fraction of rows whose argmax label equals the given label.
    pub fn accuracy(&self, features: &Matrix, labels: &[u32]) -> Result<f64, BaselineError> {
        if labels.is_empty() {
            return Err(BaselineError::EmptyTrain);
        }
        let preds = self.predict(features)?;
        let hits = preds
            .iter()
            .zip(labels)
            .filter(|(p, &l)| p.label == l)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Writes a wrapper header (`k, h, d, c` as little-endian `u32`) followed
    /// by the embedder and head network checkpoints.
    pub fn write_checkpoint<W: std::io::Write>(&self, w: &mut W) -> Result<(), BaselineError> {
        let mut header = b"ITOSRBM1".to_vec();
        for v in [self.k(), self.latent_dim(), self.input_dim(), self.c] {
            header.extend_from_slice(&(v as u32).to_le_bytes());
        }
        w.write_all(&header)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        self.embedder.write_checkpoint(w)?;
        self.head.write_checkpoint(w)?;
        Ok(())
    }

    pub fn read_checkpoint<R: std::io::Read>(r: &mut R) -> Result<Self, BaselineError> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if &header[..8] != b"ITOSRBM1" {
            return Err(NnError::Checkpoint("bad baseline magic".into()).into());
        }
        let field = |i: usize| {
            u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize
        };
        let (k, h, d, c) = (field(0), field(1), field(2), field(3));
        let embedder = DenseNet::read_checkpoint(r)?;
        let head = DenseNet::read_checkpoint(r)?;
        if embedder.input_dim() != d || embedder.output_dim() != h || head.output_dim() != k {
            return Err(
                NnError::Checkpoint("wrapper header disagrees with networks".into()).into(),
            );
        }
        Self::from_parts(embedder, head, c)
    }
}

/// Trains the initial `c`-way model on the labeled train table.
pub fn train_baseline(
    ds: &FeatureDataset,
    hyper: &BaselineHyper,
) -> Result<BaselineFit, BaselineError> {
    if ds.c() < 2 {
        return Err(BaselineError::TooFewClasses(ds.c()));
    }
    if ds.n_train() == 0 {
        return Err(BaselineError::EmptyTrain);
    }
    let mut model = BaselineModel::init(ds.d(), ds.c(), ds.c(), hyper)?;
    let empty = Matrix::zeros(0, model.latent_dim());
    let loss_trace = model.fit(ds.train_features(), ds.train_labels(), &empty, &[], hyper)?;
    let train_acc = model.accuracy(ds.train_features(), ds.train_labels())?;
    Ok(BaselineFit {
        model,
        train_acc,
        loss_trace,
    })
}

/// Free-function form of [`BaselineModel::predict`].
pub fn predict(model: &BaselineModel, features: &Matrix) -> Result<Vec<Prediction>, BaselineError> {
    model.predict(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_openset, SynthConfig};
    use crate::matrix::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_hyper() -> BaselineHyper {
        BaselineHyper {
            hidden: 16,
            latent_dim: 8,
            epochs: 40,
            ..BaselineHyper::default()
        }
    }

    fn two_blobs() -> FeatureDataset {
        let cfg = SynthConfig {
            c_known: 2,
            c_unknown: 1,
            d: 4,
            per_class_n: 40,
            center_scale: 3.0,
            noise_sigma: 0.3,
            seed: 5,
        };
        synth_openset(&cfg).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_scores() {
        let hyper = small_hyper();
        let mut m = BaselineModel::init(4, 3, 3, &hyper).unwrap();
        for l in m.head.layers_mut() {
            l.weight.map_inplace(|_| 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = random_matrix(5, 4, &mut ChaCha8Rng::seed_from_u64(1));
        for p in m.predict(&x).unwrap() {
            for s in &p.scores {
                assert!((s - 1.0 / 3.0).abs() < 1e-15);
            }
            assert!((p.confidence - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn predictions_are_normalised_and_consistent() {
        let hyper = small_hyper();
        let m = BaselineModel::init(4, 3, 4, &hyper).unwrap();
        let x = random_matrix(20, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let latent = m.embedder.infer(&x).unwrap();
        let logits = m.head.infer(&latent).unwrap();
        for (r, p) in m.predict(&x).unwrap().iter().enumerate() {
            assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let max_known = p.scores[..3].iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(p.confidence, max_known);
            assert!(p.confidence >= 1.0 / 4.0 && p.confidence <= 1.0);
            // naive argmax over raw logits
            let row = logits.row(r);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            assert_eq!(p.label as usize, best + 1);
            assert_eq!(p.latent, latent.row(r));
        }
    }

    #[test]
    fn shift_invariance_of_scores() {
        let hyper = small_hyper();
        let m = BaselineModel::init(4, 3, 3, &hyper).unwrap();
        let logits = [0.3, -1.2, 2.0];
        let shifted = [10.3, 8.8, 12.0];
        let a = m.prediction_from_logits(&logits, vec![]);
        let b = m.prediction_from_logits(&shifted, vec![]);
        assert_eq!(a.label, b.label);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let ds = two_blobs();
        let hyper = BaselineHyper {
            epochs: 0,
            ..small_hyper()
        };
        let fit = train_baseline(&ds, &hyper).unwrap();
        let init = BaselineModel::init(ds.d(), ds.c(), ds.c(), &hyper).unwrap();
        assert_eq!(fit.model, init);
    }

    #[test]
    fn separable_blobs_are_learned_deterministically() {
        let ds = two_blobs();
        let hyper = BaselineHyper {
            epochs: 100,
            ..small_hyper()
        };
        let a = train_baseline(&ds, &hyper).unwrap();
        assert!(a.train_acc >= 0.99, "train acc {}", a.train_acc);
        let b = train_baseline(&ds, &hyper).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.model.write_checkpoint(&mut ca).unwrap();
        b.model.write_checkpoint(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = BaselineModel::init(4, 3, 4, &small_hyper()).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = BaselineModel::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.k(), 4);
    }

    #[test]
    fn head_growth_modes() {
        let m = BaselineModel::init(4, 3, 3, &small_hyper()).unwrap();
        let grown = m.with_head_width(4, HeadInit::FineTune, 9).unwrap();
        assert_eq!(grown.k(), 4);
        let old = m.head.layers().last().unwrap();
        let new = grown.head.layers().last().unwrap();
        assert_eq!(old.bias[..3], new.bias[..3]);
        assert_eq!(old.weight.get(2, 1), new.weight.get(2, 1));
        let re = m.with_head_width(4, HeadInit::Reinit, 9).unwrap();
        assert_eq!(re.embedder, m.embedder);
        assert_ne!(re.head.layers()[0], m.head.layers()[0]);
    }

    #[test]
    fn errors() {
        let hyper = small_hyper();
        assert_eq!(
            BaselineModel::init(4, 1, 1, &hyper).unwrap_err(),
            BaselineError::TooFewClasses(1)
        );
        let m = BaselineModel::init(4, 3, 3, &hyper).unwrap();
        assert!(matches!(
            m.predict(&Matrix::zeros(1, 5)),
            Err(BaselineError::Nn(NnError::ShapeMismatch { .. }))
        ));
        let x = Matrix::zeros(1, 4);
        assert!(matches!(
            m.batch_loss(&x, &[4], &Matrix::zeros(0, 8), &[]),
            Err(BaselineError::LabelOutOfRange { .. })
        ));
    }
}
