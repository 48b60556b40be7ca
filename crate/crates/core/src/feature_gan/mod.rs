//! Conditional dual-adversarial feature generator.
//!
//! Five three-layer perceptrons work in the latent feature space:
//!
//! * `g`: generator, input is a one-hot class code of length `c + 1`
//!   concatenated with Gaussian noise.
//! * `d1`: real/fake critic (weight-clipped).
//! * `d2`: known/unknown critic (weight-clipped).
//! * `c1`: `(c + 1)`-way classifier.
//! * `c2`: known/unknown classifier.
//!
//! The feature extractor is not part of this module: callers pass real rows
//! already embedded by a frozen embedder.

pub mod losses;
pub mod step;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::nn::{DenseNet, NnError};
use crate::seed;

pub use losses::{loss_cls, loss_d1, loss_d2, loss_g};
pub use step::{
    critic_gradients, critic_objective, generator_gradients, generator_objective, CriticBatch,
};

#[derive(Debug, Error)]
pub enum GanError {
    #[error("real data has no unknown-class rows")]
    MissingUnknown,
    #[error("real data has no known-class rows")]
    MissingKnown,
    #[error("empty data")]
    EmptyData,
    #[error("empty batch split: {0}")]
    EmptySplit(&'static str),
    #[error("label {label} outside 1..={classes}")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which parts of the game are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_d2: bool,
    pub use_c2: bool,
    /// G also minimises the generated-batch classification loss.
    pub cls_to_generator: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_d2: true,
            use_c2: true,
            cls_to_generator: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanInitHyper {
    pub noise_dim: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub clip_bound: f64,
    pub seed: u64,
}

impl Default for GanInitHyper {
    fn default() -> Self {
        Self {
            noise_dim: 64,
            hidden: 128,
            lambda: 0.1,
            clip_bound: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanHyper {
    pub epochs: usize,
    pub batch: usize,
    /// Critic/classifier updates per generator update.
    pub n_critic: usize,
    pub lr: f64,
    pub toggles: Toggles,
    pub seed: u64,
}

impl Default for GanHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            n_critic: 5,
            lr: 0.02,
            toggles: Toggles::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanParams {
    pub g: DenseNet,
    pub d1: DenseNet,
    pub d2: DenseNet,
    pub c1: DenseNet,
    pub c2: DenseNet,
    pub noise_dim: usize,
    /// `c + 1`
    pub code_dim: usize,
    pub lambda: f64,
    pub clip_bound: f64,
}

impl GanParams {
    /// Known-class count.
    pub fn c(&self) -> usize {
        self.code_dim - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.g.output_dim()
    }

    /// Generator input rows: one-hot code of each label followed by noise.
    pub fn generator_input(&self, labels: &[u32], noise: &Matrix) -> Matrix {
        let mut codes = Matrix::zeros(labels.len(), self.code_dim);
        for (r, &l) in labels.iter().enumerate() {
            codes.set(r, l as usize - 1, 1.0);
        }
        Matrix::hstack(&codes, noise).expect("row counts agree")
    }

    pub fn critics_within_clip(&self) -> bool {
        self.d1.max_abs_param() <= self.clip_bound && self.d2.max_abs_param() <= self.clip_bound
    }
}

/// Orthogonal class codes: row `i` is the one-hot vector for label `i + 1`.
pub fn code_table(code_dim: usize) -> Matrix {
    Matrix::identity(code_dim)
}

/// Builds the five networks with seeded initialisation. D1 and D2 start
/// inside the clip bound.
pub fn init_gan(latent_dim: usize, c: usize, hyper: &GanInitHyper) -> Result<GanParams, GanError> {
    if latent_dim == 0 || c == 0 || hyper.noise_dim == 0 || hyper.hidden == 0 {
        return Err(GanError::InvalidDims(format!(
            "latent_dim={latent_dim} c={c} noise_dim={} hidden={}",
            hyper.noise_dim, hyper.hidden
        )));
    }
    if !(hyper.clip_bound > 0.0) {
        return Err(GanError::InvalidDims(format!(
            "clip_bound={}",
            hyper.clip_bound
        )));
    }
    let code_dim = c + 1;
    let h = hyper.hidden;
    let mut rng = seed::rng(hyper.seed, 0x6a_0001);
    let g = DenseNet::three_layer(hyper.noise_dim + code_dim, h, latent_dim, &mut rng)?;
    let mut d1 = DenseNet::three_layer(latent_dim, h, 1, &mut rng)?;
    let mut d2 = DenseNet::three_layer(latent_dim, h, 1, &mut rng)?;
    let c1 = DenseNet::three_layer(latent_dim, h, code_dim, &mut rng)?;
    let c2 = DenseNet::three_layer(latent_dim, h, 2, &mut rng)?;
    d1.clip_weights(hyper.clip_bound);
    d2.clip_weights(hyper.clip_bound);
    Ok(GanParams {
        g,
        d1,
        d2,
        c1,
        c2,
        noise_dim: hyper.noise_dim,
        code_dim,
        lambda: hyper.lambda,
        clip_bound: hyper.clip_bound,
    })
}

/// Mean losses of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub loss_d1: f64,
    /// `null` in JSON when D2 is disabled.
    pub loss_d2: Option<f64>,
    pub loss_cls: f64,
    pub loss_g: f64,
}

#[derive(Debug, Clone)]
pub struct GanTrainOutput {
    pub params: GanParams,
    pub trace: Vec<EpochLosses>,
}

/// Real rows grouped by 1-based label.
struct Pools {
    by_class: Vec<Vec<usize>>,
    present: Vec<u32>,
    known_present: Vec<u32>,
}

impl Pools {
    fn new(labels: &[u32], code_dim: usize) -> Result<Self, GanError> {
        let mut by_class = vec![Vec::new(); code_dim];
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 || l as usize > code_dim {
                return Err(GanError::LabelOutOfRange {
                    label: l,
                    classes: code_dim,
                });
            }
            by_class[l as usize - 1].push(i);
        }
        let present: Vec<u32> = (1..=code_dim as u32)
            .filter(|&l| !by_class[l as usize - 1].is_empty())
            .collect();
        let known_present: Vec<u32> = present
            .iter()
            .copied()
            .filter(|&l| (l as usize) < code_dim)
            .collect();
        if by_class[code_dim - 1].is_empty() {
            return Err(GanError::MissingUnknown);
        }
        if known_present.is_empty() {
            return Err(GanError::MissingKnown);
        }
        Ok(Self {
            by_class,
            present,
            known_present,
        })
    }

    /// Class-balanced draw with replacement. Row 0 is unknown and row 1 is
    /// known so every split of the known/unknown game is populated.
    fn draw<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let unknown_label = self.by_class.len() as u32;
        (0..n)
            .map(|i| {
                let class = match i {
                    0 => unknown_label,
                    1 => *self.known_present.choose(rng).unwrap(),
                    _ => *self.present.choose(rng).unwrap(),
                };
                *self.by_class[class as usize - 1].choose(rng).unwrap()
            })
            .collect()
    }
}

/// Conditions for a fake batch: uniform over all `c + 1` classes, with row 0
/// unknown and row 1 known.
fn fake_conditions<R: Rng>(n: usize, code_dim: usize, rng: &mut R) -> Vec<u32> {
    (0..n)
        .map(|i| match i {
            0 => code_dim as u32,
            1 => rng.random_range(1..code_dim as u32),
            _ => rng.random_range(1..=code_dim as u32),
        })
        .collect()
}

fn noise<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Alternating training: `n_critic` critic/classifier updates (D1 and D2
/// clipped after each) per generator update.
///
/// An epoch is `ceil(n_real / batch)` generator updates.
pub fn train_gan(
    real_latents: &Matrix,
    real_labels: &[u32],
    params: GanParams,
    hyper: &GanHyper,
) -> Result<GanTrainOutput, GanError> {
    train_gan_observed(real_latents, real_labels, params, hyper, |_| {})
}

/// [`train_gan`] with a callback invoked after every critic update.
pub fn train_gan_observed(
    real_latents: &Matrix,
    real_labels: &[u32],
    mut params: GanParams,
    hyper: &GanHyper,
    mut after_critic_step: impl FnMut(&GanParams),
) -> Result<GanTrainOutput, GanError> {
    if real_latents.rows() == 0 {
        return Err(GanError::EmptyData);
    }
    if real_latents.rows() != real_labels.len() {
        return Err(GanError::InvalidDims(format!(
            "{} rows but {} labels",
            real_latents.rows(),
            real_labels.len()
        )));
    }
    if real_latents.cols() != params.latent_dim() {
        return Err(GanError::InvalidDims(format!(
            "real rows have width {}, generator emits {}",
            real_latents.cols(),
            params.latent_dim()
        )));
    }
    let pools = Pools::new(real_labels, params.code_dim)?;
    let t = hyper.toggles;
    let batch = hyper.batch.max(2);
    let steps = real_latents.rows().div_ceil(batch);
    let mut rng = seed::rng(hyper.seed, 0x6a_0002);
    let mut trace = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let (mut s1, mut s2, mut sc, mut sg) = (0.0, 0.0, 0.0, 0.0);
        let mut critic_steps = 0usize;
        for _ in 0..steps {
            for _ in 0..hyper.n_critic {
                let idx = pools.draw(batch, &mut rng);
                let fake_labels = fake_conditions(batch, params.code_dim, &mut rng);
                let z = noise(batch, params.noise_dim, &mut rng);
                let b = CriticBatch {
                    real: real_latents.select_rows(&idx),
                    real_labels: idx.iter().map(|&i| real_labels[i]).collect(),
                    fake_input: params.generator_input(&fake_labels, &z),
                    fake_labels,
                };
                let g = critic_gradients(&params, &b, t)?;
                params.d1.sgd_step(&g.d1, hyper.lr)?;
                params.d1.clip_weights(params.clip_bound);
                if let Some(gd2) = &g.d2 {
                    params.d2.sgd_step(gd2, hyper.lr)?;
                    params.d2.clip_weights(params.clip_bound);
                }
                params.c1.sgd_step(&g.c1, hyper.lr)?;
                if let Some(gc2) = &g.c2 {
                    params.c2.sgd_step(gc2, hyper.lr)?;
                }
                after_critic_step(&params);
                s1 += g.losses.d1;
                s2 += g.losses.d2;
                sc += g.losses.cls;
                critic_steps += 1;
            }
            let fake_labels = fake_conditions(batch, params.code_dim, &mut rng);
            let z = noise(batch, params.noise_dim, &mut rng);
            let input = params.generator_input(&fake_labels, &z);
            let (lg, gg) = generator_gradients(&params, &input, &fake_labels, t)?;
            params.g.sgd_step(&gg, hyper.lr)?;
            sg += lg;
        }
        let cs = critic_steps.max(1) as f64;
        trace.push(EpochLosses {
            epoch,
            loss_d1: s1 / cs,
            loss_d2: t.use_d2.then_some(s2 / cs),
            loss_cls: sc / cs,
            loss_g: sg / steps as f64,
        });
    }
    Ok(GanTrainOutput { params, trace })
}

/// Generated rows in the latent feature space with their 1-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub features: Matrix,
    pub labels: Vec<u32>,
}

impl GeneratedSet {
    pub fn empty(latent_dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, latent_dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `counts[j]` rows of `G(onehot(j+1) ++ z)`, `z ~ N(0, I)`, for each
/// class, grouped by class in label order.
pub fn generate_features(
    params: &GanParams,
    counts: &[usize],
    seed_value: u64,
) -> Result<GeneratedSet, GanError> {
    if counts.len() != params.code_dim {
        return Err(GanError::InvalidDims(format!(
            "{} class counts for {} classes",
            counts.len(),
            params.code_dim
        )));
    }
    let labels: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j as u32 + 1, n))
        .collect();
    if labels.is_empty() {
        return Ok(GeneratedSet::empty(params.latent_dim()));
    }
    let mut rng = seed::rng(seed_value, 0x6a_0003);
    let z = noise(labels.len(), params.noise_dim, &mut rng);
    let features = params.g.infer(&params.generator_input(&labels, &z))?;
    Ok(GeneratedSet { features, labels })
}

/// Loss trace CSV: `epoch,loss_d1,loss_d2,loss_cls,loss_g`. A disabled D2
/// leaves its column empty.
pub fn write_loss_trace_csv<W: Write>(w: &mut W, trace: &[EpochLosses]) -> std::io::Result<()> {
    writeln!(w, "epoch,loss_d1,loss_d2,loss_cls,loss_g")?;
    for e in trace {
        let d2 = e.loss_d2.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            e.epoch, e.loss_d1, d2, e.loss_cls, e.loss_g
        )?;
    }
    Ok(())
}

const NET_FILES: [&str; 5] = ["g.nn", "d1.nn", "d2.nn", "c1.nn", "c2.nn"];

/// Writes five network checkpoints and a `manifest.txt` into `dir`.
pub fn save_gan(params: &GanParams, dir: &Path) -> Result<(), GanError> {
    fs::create_dir_all(dir)?;
    let nets = [&params.g, &params.d1, &params.d2, &params.c1, &params.c2];
    for (name, net) in NET_FILES.iter().zip(nets) {
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf)?;
        fs::write(dir.join(name), buf)?;
    }
    let manifest = format!(
        "format=itosr-gan v1\nnoise_dim={}\ncode_dim={}\nlambda={}\nclip_bound={}\nnetworks={}\n",
        params.noise_dim,
        params.code_dim,
        params.lambda,
        params.clip_bound,
        NET_FILES.join(",")
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_gan(dir: &Path) -> Result<GanParams, GanError> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let get = |key: &str| -> Result<&str, GanError> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| GanError::Checkpoint(format!("manifest lacks {key}")))
    };
    let parse_err = |k: &str| GanError::Checkpoint(format!("bad {k}"));
    let noise_dim: usize = get("noise_dim")?
        .parse()
        .map_err(|_| parse_err("noise_dim"))?;
    let code_dim: usize = get("code_dim")?
        .parse()
        .map_err(|_| parse_err("code_dim"))?;
    let lambda: f64 = get("lambda")?.parse().map_err(|_| parse_err("lambda"))?;
    let clip_bound: f64 = get("clip_bound")?
        .parse()
        .map_err(|_| parse_err("clip_bound"))?;
    let mut nets = Vec::with_capacity(5);
    for name in NET_FILES {
        let bytes = fs::read(dir.join(name))?;
        nets.push(DenseNet::read_checkpoint(&mut bytes.as_slice())?);
    }
    let mut it = nets.into_iter();
    let params = GanParams {
        g: it.next().unwrap(),
        d1: it.next().unwrap(),
        d2: it.next().unwrap(),
        c1: it.next().unwrap(),
        c2: it.next().unwrap(),
        noise_dim,
        code_dim,
        lambda,
        clip_bound,
    };
    if params.g.input_dim() != noise_dim + code_dim || params.c1.output_dim() != code_dim {
        return Err(GanError::Checkpoint(
            "manifest disagrees with networks".into(),
        ));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GanInitHyper {
        GanInitHyper {
            noise_dim: 4,
            hidden: 8,
            seed: 3,
            ..GanInitHyper::default()
        }
    }

    #[test]
    fn shapes_follow_class_count() {
        let p = init_gan(
            64,
            6,
            &GanInitHyper {
                noise_dim: 64,
                hidden: 16,
                ..GanInitHyper::default()
            },
        )
        .unwrap();
        assert_eq!(p.g.input_dim(), 71);
        assert_eq!(p.c1.output_dim(), 7);
        assert_eq!(p.c2.output_dim(), 2);
        assert_eq!(p.d1.output_dim(), 1);
        assert_eq!(p.d2.output_dim(), 1);
        assert_eq!(p.g.layers().len(), 3);
        assert!(p.critics_within_clip());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(
            init_gan(5, 3, &small()).unwrap(),
            init_gan(5, 3, &small()).unwrap()
        );
        assert!(init_gan(0, 3, &small()).is_err());
    }

    #[test]
    fn codes_are_orthonormal() {
        let t = code_table(7);
        for i in 0..7 {
            for j in 0..7 {
                let dot: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                assert_eq!(dot, if i == j { 1.0 } else { 0.0 });
            }
        }
        let p = init_gan(5, 2, &small()).unwrap();
        let t = code_table(3);
        let input = p.generator_input(&[3, 1], &Matrix::zeros(2, 4));
        assert_eq!(&input.row(0)[..3], t.row(2));
        assert_eq!(&input.row(1)[..3], t.row(0));
    }

    #[test]
    fn generation_counts_and_determinism() {
        let p = init_gan(5, 6, &small()).unwrap();
        let empty = generate_features(&p, &[0; 7], 1).unwrap();
        assert!(empty.is_empty());
        let counts = [5, 5, 5, 5, 5, 5, 30];
        let a = generate_features(&p, &counts, 1).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(a.labels.iter().filter(|&&l| l == 7).count(), 30);
        assert!(a.features.is_finite());
        assert_eq!(a, generate_features(&p, &counts, 1).unwrap());
        assert_ne!(a, generate_features(&p, &counts, 2).unwrap());
    }

    fn toy_data() -> (Matrix, Vec<u32>) {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![i as f64 * 0.1, 1.0 - i as f64 * 0.05])
            .collect();
        let labels = (0..12).map(|i| (i % 3) as u32 + 1).collect();
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn zero_epochs_leaves_params() {
        let (x, y) = toy_data();
        let p = init_gan(2, 2, &small()).unwrap();
        let out = train_gan(
            &x,
            &y,
            p.clone(),
            &GanHyper {
                epochs: 0,
                ..GanHyper::default()
            },
        )
        .unwrap();
        assert_eq!(out.params, p);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn missing_unknown_rejected() {
        let (x, _) = toy_data();
        let y = vec![1; 12];
        let p = init_gan(2, 2, &small()).unwrap();
        assert!(matches!(
            train_gan(&x, &y, p, &GanHyper::default()),
            Err(GanError::MissingUnknown)
        ));
    }

    #[test]
    fn clip_holds_after_every_critic_step() {
        let (x, y) = toy_data();
        let p = init_gan(2, 2, &small()).unwrap();
        let mut steps = 0;
        let out = train_gan_observed(
            &x,
            &y,
            p,
            &GanHyper {
                epochs: 3,
                batch: 6,
                ..GanHyper::default()
            },
            |p| {
                steps += 1;
                assert!(p.d1.max_abs_param() <= p.clip_bound);
                assert!(p.d2.max_abs_param() <= p.clip_bound);
            },
        )
        .unwrap();
        assert_eq!(steps, 3 * 2 * 5);
        assert_eq!(out.trace.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = toy_data();
        let hyper = GanHyper {
            epochs: 2,
            batch: 6,
            ..GanHyper::default()
        };
        let a = train_gan(&x, &y, init_gan(2, 2, &small()).unwrap(), &hyper).unwrap();
        let b = train_gan(&x, &y, init_gan(2, 2, &small()).unwrap(), &hyper).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn checkpoint_and_trace_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_gan(3, 2, &small()).unwrap();
        save_gan(&p, dir.path()).unwrap();
        assert_eq!(load_gan(dir.path()).unwrap(), p);

        let mut buf = Vec::new();
        write_loss_trace_csv(
            &mut buf,
            &[EpochLosses {
                epoch: 0,
                loss_d1: -0.5,
                loss_d2: None,
                loss_cls: 1.25,
                loss_g: 2.0,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,loss_d1,loss_d2,loss_cls,loss_g\n0,-0.5,,1.25,2\n"
        );
    }
}
