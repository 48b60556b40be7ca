//! Forward evaluation and gradients of one critic/classifier update and one
//! generator update.
//!
//! Every `*_objective` function evaluates the scalar that the matching
//! `*_gradients` function differentiates, together with the ReLU pattern of
//! all networks involved (for finite-difference checks).

use super::losses::{c1_targets, c2_targets, loss_cls, loss_d1, loss_d2, loss_g};
use super::{GanError, GanParams, Toggles};
use crate::matrix::Matrix;
use crate::nn::loss::cross_entropy;
use crate::nn::{DenseNet, GradientSet};

/// One critic-step batch: real latent rows and generator inputs
/// (`code ++ noise`) with their 1-based condition labels.
#[derive(Debug, Clone)]
pub struct CriticBatch {
    pub real: Matrix,
    pub real_labels: Vec<u32>,
    pub fake_input: Matrix,
    pub fake_labels: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLosses {
    pub d1: f64,
    /// Value D2 ascends; `NaN` when D2 is disabled.
    pub d2: f64,
    pub cls: f64,
}

#[derive(Debug, Clone)]
pub struct CriticGrads {
    pub losses: CriticLosses,
    pub d1: GradientSet,
    /// Gradient of `-loss_d2` (D2 descends the negated value).
    pub d2: Option<GradientSet>,
    pub c1: GradientSet,
    pub c2: Option<GradientSet>,
}

fn column(m: &Matrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn split_by(values: &[f64], is_unknown: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for (&v, &u) in values.iter().zip(is_unknown) {
        if u {
            unknown.push(v);
        } else {
            known.push(v);
        }
    }
    (known, unknown)
}

fn count(flags: &[bool], want: bool) -> f64 {
    flags.iter().filter(|&&u| u == want).count() as f64
}

fn unknown_flags(labels: &[u32], c: usize) -> Vec<bool> {
    labels.iter().map(|&l| l as usize == c + 1).collect()
}

/// Per-row output gradient of `-loss_d2` with respect to D2 outputs, for
/// one half (real or fake) of a batch.
fn d2_half_grad(is_unknown: &[bool]) -> Matrix {
    let nu = count(is_unknown, true);
    let nk = count(is_unknown, false);
    let g = is_unknown
        .iter()
        .map(|&u| if u { 1.0 / nu } else { -1.0 / nk })
        .collect();
    Matrix::from_vec(is_unknown.len(), 1, g).unwrap()
}

fn check_batch(params: &GanParams, b: &CriticBatch) -> Result<(), GanError> {
    if b.real.rows() == 0 || b.fake_input.rows() == 0 {
        return Err(GanError::EmptyData);
    }
    if b.real.rows() != b.real_labels.len() || b.fake_input.rows() != b.fake_labels.len() {
        return Err(GanError::EmptyData);
    }
    let classes = params.code_dim;
    c1_targets(&b.real_labels, classes)?;
    c1_targets(&b.fake_labels, classes)?;
    Ok(())
}

/// Objectives of the critic step, with fakes produced by the current G.
pub fn critic_objective(
    params: &GanParams,
    b: &CriticBatch,
    t: Toggles,
) -> Result<(CriticLosses, Vec<bool>), GanError> {
    check_batch(params, b)?;
    let c = params.c();
    let fake = params.g.infer(&b.fake_input)?;
    let mut pattern = Vec::new();
    let mut trace = |net: &DenseNet, x: &Matrix| -> Result<Matrix, GanError> {
        let (y, tape) = net.forward(x)?;
        pattern.extend(tape.relu_pattern());
        Ok(y)
    };
    let d1r = column(&trace(&params.d1, &b.real)?);
    let d1f = column(&trace(&params.d1, &fake)?);
    let d1 = loss_d1(&d1r, &d1f)?;
    let ru = unknown_flags(&b.real_labels, c);
    let fu = unknown_flags(&b.fake_labels, c);
    let d2 = if t.use_d2 {
        let (kr, ur) = split_by(&column(&trace(&params.d2, &b.real)?), &ru);
        let (kf, uf) = split_by(&column(&trace(&params.d2, &fake)?), &fu);
        loss_d2(&kr, &ur, &kf, &uf)?
    } else {
        f64::NAN
    };
    let all = Matrix::vstack(&[&b.real, &fake], params.latent_dim()).unwrap();
    let mut labels = b.real_labels.clone();
    labels.extend_from_slice(&b.fake_labels);
    let c1_logits = trace(&params.c1, &all)?;
    let unk: Vec<bool> = ru.iter().chain(&fu).copied().collect();
    let c2_logits = if t.use_c2 {
        Some(trace(&params.c2, &all)?)
    } else {
        None
    };
    let cls = loss_cls(
        &c1_logits,
        &labels,
        c2_logits.as_ref().map(|m| (m, unk.as_slice())),
    )?;
    Ok((CriticLosses { d1, d2, cls }, pattern))
}

/// Gradients for D1 (descending `loss_d1`), D2 (ascending `loss_d2`) and
/// C1/C2 (descending `loss_cls`). G is held fixed.
pub fn critic_gradients(
    params: &GanParams,
    b: &CriticBatch,
    t: Toggles,
) -> Result<CriticGrads, GanError> {
    check_batch(params, b)?;
    let c = params.c();
    let fake = params.g.infer(&b.fake_input)?;
    let nr = b.real.rows() as f64;
    let nf = fake.rows() as f64;

    // D1 on real and fake halves.
    let (d1r, tr) = params.d1.forward(&b.real)?;
    let (d1f, tf) = params.d1.forward(&fake)?;
    let loss1 = loss_d1(&column(&d1r), &column(&d1f))?;
    let mut g_d1 = params.d1.backward(
        &tr,
        &Matrix::from_vec(b.real.rows(), 1, vec![-1.0 / nr; b.real.rows()]).unwrap(),
    )?;
    g_d1.add_assign(&params.d1.backward(
        &tf,
        &Matrix::from_vec(fake.rows(), 1, vec![1.0 / nf; fake.rows()]).unwrap(),
    )?);

    let ru = unknown_flags(&b.real_labels, c);
    let fu = unknown_flags(&b.fake_labels, c);

    let (loss2, g_d2) = if t.use_d2 {
        let (d2r, tr) = params.d2.forward(&b.real)?;
        let (d2f, tf) = params.d2.forward(&fake)?;
        let (kr, ur) = split_by(&column(&d2r), &ru);
        let (kf, uf) = split_by(&column(&d2f), &fu);
        let v = loss_d2(&kr, &ur, &kf, &uf)?;
        let mut g = params.d2.backward(&tr, &d2_half_grad(&ru))?;
        g.add_assign(&params.d2.backward(&tf, &d2_half_grad(&fu))?);
        (v, Some(g))
    } else {
        (f64::NAN, None)
    };

    let all = Matrix::vstack(&[&b.real, &fake], params.latent_dim()).unwrap();
    let mut labels = b.real_labels.clone();
    labels.extend_from_slice(&b.fake_labels);
    let unk: Vec<bool> = ru.iter().chain(&fu).copied().collect();

    let (c1_logits, t1) = params.c1.forward(&all)?;
    let (l1, dl1) = cross_entropy(&c1_logits, &c1_targets(&labels, params.code_dim)?)?;
    let g_c1 = params.c1.backward(&t1, &dl1)?;
    let (l2, g_c2) = if t.use_c2 {
        let (c2_logits, t2) = params.c2.forward(&all)?;
        let (l2, dl2) = cross_entropy(&c2_logits, &c2_targets(&unk))?;
        (l2, Some(params.c2.backward(&t2, &dl2)?))
    } else {
        (0.0, None)
    };

    Ok(CriticGrads {
        losses: CriticLosses {
            d1: loss1,
            d2: loss2,
            cls: l1 + l2,
        },
        d1: g_d1,
        d2: g_d2,
        c1: g_c1,
        c2: g_c2,
    })
}

/// Generator objective for a batch of generator inputs.
pub fn generator_objective(
    params: &GanParams,
    fake_input: &Matrix,
    fake_labels: &[u32],
    t: Toggles,
) -> Result<(f64, Vec<bool>), GanError> {
    if fake_input.rows() == 0 {
        return Err(GanError::EmptyData);
    }
    let c = params.c();
    let (fake, tg) = params.g.forward(fake_input)?;
    let mut pattern = tg.relu_pattern();
    let mut trace = |net: &DenseNet, x: &Matrix| -> Result<Matrix, GanError> {
        let (y, tape) = net.forward(x)?;
        pattern.extend(tape.relu_pattern());
        Ok(y)
    };
    let d1f = column(&trace(&params.d1, &fake)?);
    let fu = unknown_flags(fake_labels, c);
    let split = if t.use_d2 {
        Some(split_by(&column(&trace(&params.d2, &fake)?), &fu))
    } else {
        None
    };
    let cls = if t.cls_to_generator {
        let c1_logits = trace(&params.c1, &fake)?;
        let c2_logits = if t.use_c2 {
            Some(trace(&params.c2, &fake)?)
        } else {
            None
        };
        loss_cls(
            &c1_logits,
            fake_labels,
            c2_logits.as_ref().map(|m| (m, fu.as_slice())),
        )?
    } else {
        c1_targets(fake_labels, params.code_dim)?;
        0.0
    };
    let v = loss_g(
        &d1f,
        split.as_ref().map(|(k, u)| (u.as_slice(), k.as_slice())),
        cls,
        params.lambda,
    )?;
    Ok((v, pattern))
}

/// Gradient of [`generator_objective`] with respect to G's parameters.
pub fn generator_gradients(
    params: &GanParams,
    fake_input: &Matrix,
    fake_labels: &[u32],
    t: Toggles,
) -> Result<(f64, GradientSet), GanError> {
    if fake_input.rows() == 0 {
        return Err(GanError::EmptyData);
    }
    let c = params.c();
    let n = fake_input.rows();
    let nf = n as f64;
    let (fake, tg) = params.g.forward(fake_input)?;
    let fu = unknown_flags(fake_labels, c);

    let (d1f, t1) = params.d1.forward(&fake)?;
    let d1_vals = column(&d1f);
    let (_, mut dfake) = params
        .d1
        .backward_with_input(&t1, &Matrix::from_vec(n, 1, vec![-1.0 / nf; n]).unwrap())?;

    let mut split = None;
    if t.use_d2 {
        let (d2f, t2) = params.d2.forward(&fake)?;
        let nu = count(&fu, true);
        let nk = count(&fu, false);
        if nu == 0.0 || nk == 0.0 {
            return Err(GanError::EmptySplit("generator batch conditions"));
        }
        let lambda = params.lambda;
        let g: Vec<f64> = fu
            .iter()
            .map(|&u| if u { -lambda / nu } else { lambda / nk })
            .collect();
        let (_, dx) = params
            .d2
            .backward_with_input(&t2, &Matrix::from_vec(n, 1, g).unwrap())?;
        add_into(&mut dfake, &dx);
        split = Some(split_by(&column(&d2f), &fu));
    }

    let mut cls = 0.0;
    if t.cls_to_generator {
        let (c1_logits, tc1) = params.c1.forward(&fake)?;
        let (l1, dl1) = cross_entropy(&c1_logits, &c1_targets(fake_labels, params.code_dim)?)?;
        let (_, dx) = params.c1.backward_with_input(&tc1, &dl1)?;
        add_into(&mut dfake, &dx);
        cls += l1;
        if t.use_c2 {
            let (c2_logits, tc2) = params.c2.forward(&fake)?;
            let (l2, dl2) = cross_entropy(&c2_logits, &c2_targets(&fu))?;
            let (_, dx) = params.c2.backward_with_input(&tc2, &dl2)?;
            add_into(&mut dfake, &dx);
            cls += l2;
        }
    } else {
        c1_targets(fake_labels, params.code_dim)?;
    }

    let value = loss_g(
        &d1_vals,
        split.as_ref().map(|(k, u)| (u.as_slice(), k.as_slice())),
        cls,
        params.lambda,
    )?;
    let grads = params.g.backward(&tg, &dfake)?;
    Ok((value, grads))
}

fn add_into(acc: &mut Matrix, other: &Matrix) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += b;
    }
}
