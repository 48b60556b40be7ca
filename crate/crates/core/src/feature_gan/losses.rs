//! Scalar objectives of the generator game. Each function here is a plain
//! evaluation over network outputs; the gradient plumbing lives in
//! [`super::step`].

use super::GanError;
use crate::matrix::Matrix;
use crate::nn::loss::cross_entropy;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn nonempty(v: &[f64], what: &'static str) -> Result<(), GanError> {
    if v.is_empty() {
        Err(GanError::EmptySplit(what))
    } else {
        Ok(())
    }
}

/// Critic loss of the real/fake game, `-(mean(real) - mean(fake))`.
///
/// D1 descends this, i.e. ascends `E[D1(x)] - E[D1(x~)]`.
pub fn loss_d1(d1_real: &[f64], d1_fake: &[f64]) -> Result<f64, GanError> {
    nonempty(d1_real, "d1 real")?;
    nonempty(d1_fake, "d1 fake")?;
    Ok(-(mean(d1_real) - mean(d1_fake)))
}

/// Value of the known/unknown game:
///
/// `-[mean(unknown_real) - mean(known_real)] - [mean(unknown_fake) - mean(known_fake)]`
///
/// D2 ascends this value, so it learns to score known-conditioned features
/// above unknown-conditioned ones.
pub fn loss_d2(
    d2_known_real: &[f64],
    d2_unknown_real: &[f64],
    d2_known_fake: &[f64],
    d2_unknown_fake: &[f64],
) -> Result<f64, GanError> {
    nonempty(d2_known_real, "d2 known real")?;
    nonempty(d2_unknown_real, "d2 unknown real")?;
    nonempty(d2_known_fake, "d2 known fake")?;
    nonempty(d2_unknown_fake, "d2 unknown fake")?;
    Ok(-(mean(d2_unknown_real) - mean(d2_known_real))
        - (mean(d2_unknown_fake) - mean(d2_known_fake)))
}

/// Zero-based C1 targets from 1-based labels in `1..=classes`.
pub(crate) fn c1_targets(labels: &[u32], classes: usize) -> Result<Vec<usize>, GanError> {
    labels
        .iter()
        .map(|&l| {
            if l == 0 || l as usize > classes {
                Err(GanError::LabelOutOfRange { label: l, classes })
            } else {
                Ok(l as usize - 1)
            }
        })
        .collect()
}

/// C2 targets: index 0 = known, 1 = unknown.
pub(crate) fn c2_targets(is_unknown: &[bool]) -> Vec<usize> {
    is_unknown.iter().map(|&u| usize::from(u)).collect()
}

/// Classification loss: mean cross-entropy of C1 over `c + 1` classes plus,
/// when C2 logits are given, mean cross-entropy of C2 over known/unknown.
/// Rows are the concatenated real and generated batch.
pub fn loss_cls(
    c1_logits: &Matrix,
    c1_labels: &[u32],
    c2: Option<(&Matrix, &[bool])>,
) -> Result<f64, GanError> {
    let t1 = c1_targets(c1_labels, c1_logits.cols())?;
    let (l1, _) = cross_entropy(c1_logits, &t1)?;
    let l2 = match c2 {
        Some((logits, is_unknown)) => cross_entropy(logits, &c2_targets(is_unknown))?.0,
        None => 0.0,
    };
    Ok(l1 + l2)
}

/// Generator objective.
///
/// The generator minimises the dual-adversarial value. Term by term:
///
/// * `E[D1(x)] - E[D1(x~)]`: only the fake term depends on G, giving
///   `-mean(d1_fake)`.
/// * `lambda * { -E[D2(x|unk) - D2(x|known)] - E[D2(x~|unk) - D2(x~|known)] }`:
///   only the fake bracket depends on G, giving
///   `-lambda * (mean(d2_unknown_fake) - mean(d2_known_fake))`.
///
/// so G pushes D2 down on known-conditioned fakes and up on
/// unknown-conditioned fakes, opposing D2 on both groups. The generated-batch
/// share of the classification loss is added as `fake_cls_loss`.
/// With `d2` split `None` the second term is dropped.
pub fn loss_g(
    d1_fake: &[f64],
    d2_split: Option<(&[f64], &[f64])>,
    fake_cls_loss: f64,
    lambda: f64,
) -> Result<f64, GanError> {
    nonempty(d1_fake, "d1 fake")?;
    let adv2 = match d2_split {
        Some((unknown_fake, known_fake)) => {
            nonempty(unknown_fake, "d2 unknown fake")?;
            nonempty(known_fake, "d2 known fake")?;
            -lambda * (mean(unknown_fake) - mean(known_fake))
        }
        None => 0.0,
    };
    Ok(-mean(d1_fake) + adv2 + fake_cls_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn d1_examples() {
        assert_eq!(loss_d1(&[1.0, 1.0], &[0.0]).unwrap(), -1.0);
        assert_eq!(loss_d1(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(loss_d1(&[], &[1.0]).is_err());
    }

    #[test]
    fn d1_matches_naive_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let nr = rng.random_range(1..20);
            let nf = rng.random_range(1..20);
            let r = rand_vec(nr, &mut rng);
            let f = rand_vec(nf, &mut rng);
            let mut sr = 0.0;
            for v in &r {
                sr += v;
            }
            let mut sf = 0.0;
            for v in &f {
                sf += v;
            }
            let oracle = sf / nf as f64 - sr / nr as f64;
            assert!((loss_d1(&r, &f).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn d2_examples() {
        assert_eq!(loss_d2(&[0.0], &[0.0], &[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(loss_d2(&[0.0], &[1.0], &[0.0], &[0.0]).unwrap(), -1.0);
        assert!(matches!(
            loss_d2(&[0.0], &[], &[0.0], &[0.0]),
            Err(GanError::EmptySplit(_))
        ));
    }

    #[test]
    fn d2_matches_four_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let parts: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let n = rng.random_range(1..15);
                    rand_vec(n, &mut rng)
                })
                .collect();
            let m: Vec<f64> = parts
                .iter()
                .map(|p| p.iter().fold(0.0, |a, b| a + b) / p.len() as f64)
                .collect();
            // parts: known_real, unknown_real, known_fake, unknown_fake
            let oracle = -(m[1] - m[0]) - (m[3] - m[2]);
            let got = loss_d2(&parts[0], &parts[1], &parts[2], &parts[3]).unwrap();
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_uniform_and_limits() {
        let c1 = Matrix::zeros(4, 7);
        let c2 = Matrix::zeros(4, 2);
        let v = loss_cls(&c1, &[1, 3, 7, 7], Some((&c2, &[false, false, true, true]))).unwrap();
        assert!((v - (7f64.ln() + 2f64.ln())).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0] {
            let mut c1 = Matrix::zeros(2, 3);
            c1.set(0, 0, scale);
            c1.set(1, 2, scale);
            let mut c2 = Matrix::zeros(2, 2);
            c2.set(0, 0, scale);
            c2.set(1, 1, scale);
            let v = loss_cls(&c1, &[1, 3], Some((&c2, &[false, true]))).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-40);
        assert!(matches!(
            loss_cls(&Matrix::zeros(1, 3), &[4], None),
            Err(GanError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cls_matches_log_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(1..12);
            let k = rng.random_range(2..8);
            let c1 = Matrix::from_vec(n, k, rand_vec(n * k, &mut rng)).unwrap();
            let c2 = Matrix::from_vec(n, 2, rand_vec(n * 2, &mut rng)).unwrap();
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(1..=k as u32)).collect();
            let unk: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let mut oracle = 0.0;
            for r in 0..n {
                let row = c1.row(r);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                oracle -= (row[labels[r] as usize - 1].exp() / z).ln() / n as f64;
                let row = c2.row(r);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                oracle -= (row[usize::from(unk[r])].exp() / z).ln() / n as f64;
            }
            let got = loss_cls(&c1, &labels, Some((&c2, &unk))).unwrap();
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        }
    }

    #[test]
    fn g_examples() {
        let d1 = [0.5, 1.5];
        assert_eq!(loss_g(&d1, Some((&[3.0], &[1.0])), 0.0, 0.0).unwrap(), -1.0);
        let uniform = 7f64.ln() + 2f64.ln();
        let v = loss_g(&[0.0; 3], Some((&[0.0], &[0.0, 0.0])), uniform, 0.1).unwrap();
        assert!((v - uniform).abs() < 1e-15);
    }

    #[test]
    fn g_matches_term_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lambda = 0.1;
        for _ in 0..30 {
            let nd = rng.random_range(1..10);
            let nu = rng.random_range(1..10);
            let nk = rng.random_range(1..10);
            let d1 = rand_vec(nd, &mut rng);
            let u = rand_vec(nu, &mut rng);
            let k = rand_vec(nk, &mut rng);
            let cls = rng.random_range(0.0..3.0);
            let avg = |v: &[f64]| v.iter().fold(0.0, |a, b| a + b) / v.len() as f64;
            let oracle = -avg(&d1) + lambda * (avg(&k) - avg(&u)) + cls;
            let got = loss_g(&d1, Some((&u, &k)), cls, lambda).unwrap();
            assert!((got - oracle).abs() < 1e-12);
        }
    }
}
