//! Central finite-difference checks of the hand-written backward passes.
//!
//! A coordinate is skipped when either perturbed evaluation changes the ReLU
//! on/off pattern of the traced computation: the loss is not differentiable
//! across that kink and the difference quotient is meaningless there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::baseline::{BaselineHyper, BaselineModel};
use crate::feature_gan::step::{
    critic_gradients, critic_objective, generator_gradients, generator_objective,
};
use crate::feature_gan::{
    init_gan, train_gan_observed, CriticBatch, GanHyper, GanInitHyper, GanParams, Toggles,
};
use crate::matrix::Matrix;
use crate::nn::{DenseNet, GradientSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    /// Perturbation step.
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetCheck {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl NetCheck {
    fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            instances: 0,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        }
    }

    fn merge(&mut self, other: &NetCheck) {
        self.instances += other.instances;
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }
}

/// Compares `analytic` with central differences of `eval` over every
/// parameter of `net`. `eval` receives a perturbed copy and returns the
/// scalar loss with its ReLU pattern.
pub fn check_net<E>(
    name: &str,
    net: &DenseNet,
    analytic: &GradientSet,
    cfg: FdConfig,
    mut eval: impl FnMut(&DenseNet) -> Result<(f64, Vec<bool>), E>,
) -> Result<NetCheck, E> {
    let (_, base_pattern) = eval(net)?;
    let grads = analytic.flat();
    assert_eq!(grads.len(), net.param_count(), "gradient layout");
    let mut out = NetCheck::empty(name);
    out.instances = 1;
    let mut probe = net.clone();
    for (i, &a) in grads.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + cfg.h;
        let (fp, pp) = eval(&probe)?;
        *probe.param_mut(i) = orig - cfg.h;
        let (fm, pm) = eval(&probe)?;
        *probe.param_mut(i) = orig;
        if pp != base_pattern || pm != base_pattern {
            out.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.h);
        out.checked += 1;
        out.max_rel_err = out.max_rel_err.max(relative_error(a, numeric, cfg.floor));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub tolerance: f64,
    pub fd: FdConfig,
    pub seed: u64,
    /// Corrupts the generator's analytic gradient, to prove the harness
    /// can fail.
    pub inject_bug: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            tolerance: 1e-4,
            fd: FdConfig::default(),
            seed: 0,
            inject_bug: false,
        }
    }
}

pub const CHECKED_NETWORKS: [&str; 7] = ["G", "D1", "D2", "C1", "C2", "embedder", "head"];

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Labels in `1..=classes` where the first row is `classes` and the second
/// is known, so both known/unknown splits are populated.
fn labels(n: usize, classes: u32, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n)
        .map(|i| match i {
            0 => classes,
            1 => rng.random_range(1..classes),
            _ => rng.random_range(1..=classes),
        })
        .collect()
}

fn gan_instance(rng: &mut ChaCha8Rng, seed: u64) -> (GanParams, CriticBatch) {
    let latent = rng.random_range(2..5);
    let c = rng.random_range(2..4);
    let params = init_gan(
        latent,
        c,
        &GanInitHyper {
            noise_dim: 3,
            hidden: rng.random_range(3..7),
            lambda: 0.1,
            clip_bound: 1.0,
            seed,
        },
    )
    .expect("valid instance dims");
    let nr = rng.random_range(3..8);
    let nf = rng.random_range(3..8);
    let real_labels = labels(nr, params.code_dim as u32, rng);
    let fake_labels = labels(nf, params.code_dim as u32, rng);
    let z = gaussian(nf, params.noise_dim, rng);
    let batch = CriticBatch {
        real: gaussian(nr, latent, rng),
        real_labels,
        fake_input: params.generator_input(&fake_labels, &z),
        fake_labels,
    };
    (params, batch)
}

fn with_net(params: &GanParams, which: &str, net: &DenseNet) -> GanParams {
    let mut p = params.clone();
    match which {
        "G" => p.g = net.clone(),
        "D1" => p.d1 = net.clone(),
        "D2" => p.d2 = net.clone(),
        "C1" => p.c1 = net.clone(),
        "C2" => p.c2 = net.clone(),
        _ => unreachable!("unknown network {which}"),
    }
    p
}

fn check_gan_instance(
    params: &GanParams,
    b: &CriticBatch,
    t: Toggles,
    cfg: &SuiteConfig,
) -> Result<Vec<NetCheck>, crate::feature_gan::GanError> {
    let mut out = Vec::new();
    let g = critic_gradients(params, b, t)?;
    let critics: [(&str, &DenseNet, Option<&GradientSet>); 4] = [
        ("D1", &params.d1, Some(&g.d1)),
        ("D2", &params.d2, g.d2.as_ref()),
        ("C1", &params.c1, Some(&g.c1)),
        ("C2", &params.c2, g.c2.as_ref()),
    ];
    for (name, net, grads) in critics {
        let Some(grads) = grads else { continue };
        out.push(check_net(name, net, grads, cfg.fd, |probe| {
            let (l, pat) = critic_objective(&with_net(params, name, probe), b, t)?;
            let v = match name {
                "D1" => l.d1,
                // D2 descends the negated value.
                "D2" => -l.d2,
                _ => l.cls,
            };
            Ok::<_, crate::feature_gan::GanError>((v, pat))
        })?);
    }
    let (_, mut gg) = generator_gradients(params, &b.fake_input, &b.fake_labels, t)?;
    if cfg.inject_bug {
        for v in gg.flat_mut() {
            *v *= 1.01;
        }
    }
    out.push(check_net("G", &params.g, &gg, cfg.fd, |probe| {
        generator_objective(
            &with_net(params, "G", probe),
            &b.fake_input,
            &b.fake_labels,
            t,
        )
    })?);
    Ok(out)
}

fn check_baseline_instance(
    rng: &mut ChaCha8Rng,
    seed: u64,
    cfg: &SuiteConfig,
) -> Result<Vec<NetCheck>, crate::baseline::BaselineError> {
    let d = rng.random_range(2..6);
    let c = rng.random_range(2..5);
    let k = c + rng.random_range(0..2);
    let hyper = BaselineHyper {
        hidden: rng.random_range(3..7),
        latent_dim: rng.random_range(2..5),
        seed,
        ..BaselineHyper::default()
    };
    let model = BaselineModel::init(d, c, k, &hyper)?;
    let nr = rng.random_range(2..7);
    let nl = rng.random_range(0..4);
    let raw = gaussian(nr, d, rng);
    let raw_labels: Vec<u32> = (0..nr).map(|_| rng.random_range(1..=k as u32)).collect();
    let lat = gaussian(nl, model.latent_dim(), rng);
    let lat_labels: Vec<u32> = (0..nl).map(|_| rng.random_range(1..=k as u32)).collect();
    let g = model.batch_gradients(&raw, &raw_labels, &lat, &lat_labels)?;
    let emb = g.embedder.as_ref().expect("raw rows present");
    let mut out = Vec::new();
    out.push(check_net(
        "embedder",
        &model.embedder,
        emb,
        cfg.fd,
        |probe| {
            let m = BaselineModel::from_parts(probe.clone(), model.head.clone(), c)?;
            m.batch_loss(&raw, &raw_labels, &lat, &lat_labels)
        },
    )?);
    out.push(check_net("head", &model.head, &g.head, cfg.fd, |probe| {
        let m = BaselineModel::from_parts(model.embedder.clone(), probe.clone(), c)?;
        m.batch_loss(&raw, &raw_labels, &lat, &lat_labels)
    })?);
    Ok(out)
}

/// Runs `cfg.instances` random small instances per network and aggregates
/// one [`NetCheck`] per network, in [`CHECKED_NETWORKS`] order.
///
/// Every instance checks the full game; the generator is additionally
/// checked with D2 and C2 switched off.
pub fn run_gradient_suite(cfg: &SuiteConfig) -> Result<Vec<NetCheck>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut totals: Vec<NetCheck> = CHECKED_NETWORKS
        .iter()
        .map(|n| NetCheck::empty(n))
        .collect();
    let mut add = |checks: Vec<NetCheck>| {
        for c in checks {
            let slot = totals.iter_mut().find(|t| t.name == c.name).unwrap();
            slot.merge(&c);
        }
    };
    for i in 0..cfg.instances {
        let seed = cfg.seed.wrapping_add(i as u64);
        let (params, batch) = gan_instance(&mut rng, seed);
        add(check_gan_instance(&params, &batch, Toggles::default(), cfg)
            .map_err(|e| e.to_string())?);
        let reduced = Toggles {
            use_d2: false,
            use_c2: false,
            cls_to_generator: true,
        };
        let g_only: Vec<NetCheck> = check_gan_instance(&params, &batch, reduced, cfg)
            .map_err(|e| e.to_string())?
            .into_iter()
            .filter(|c| c.name == "G")
            .map(|mut c| {
                c.instances = 0;
                c
            })
            .collect();
        add(g_only);
        add(check_baseline_instance(&mut rng, seed, cfg).map_err(|e| e.to_string())?);
    }
    Ok(totals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipReport {
    pub critic_steps: usize,
    /// Largest `max |param|` of D1 or D2 seen after any critic step.
    pub worst: f64,
    pub bound: f64,
}

impl ClipReport {
    pub fn passed(&self, min_steps: usize) -> bool {
        self.critic_steps >= min_steps && self.worst <= self.bound
    }
}

/// Trains a small GAN for at least `min_steps` critic steps and records the
/// largest critic parameter magnitude after each step.
pub fn clip_discipline_check(min_steps: usize, seed: u64) -> Result<ClipReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, batch, n_critic) = (40, 20, 5);
    let params = init_gan(
        4,
        3,
        &GanInitHyper {
            noise_dim: 4,
            hidden: 16,
            seed,
            ..GanInitHyper::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let real = gaussian(n, 4, &mut rng);
    let labels = labels(n, params.code_dim as u32, &mut rng);
    let per_epoch = n.div_ceil(batch) * n_critic;
    let hyper = GanHyper {
        epochs: min_steps.div_ceil(per_epoch),
        batch,
        n_critic,
        seed,
        ..GanHyper::default()
    };
    let bound = params.clip_bound;
    let mut report = ClipReport {
        critic_steps: 0,
        worst: 0.0,
        bound,
    };
    train_gan_observed(&real, &labels, params, &hyper, |p| {
        report.critic_steps += 1;
        report.worst = report
            .worst
            .max(p.d1.max_abs_param())
            .max(p.d2.max_abs_param());
    })
    .map_err(|e| e.to_string())?;
    Ok(report)
}
