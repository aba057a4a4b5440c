//! Monte Carlo Q-function pieces evaluated on a fixed set of posterior draws.
//!
//! `Q1(θ) = −(1/L) Σ_l Σ_k log f(y_k | X_k, α_kl; θ)` is on the total-sample
//! scale; the M-steps minimize `Q1/N` plus the penalties so that `λ` lives on
//! a per-observation scale.

use nalgebra::{DMatrix, DVector};

use crate::model::{AugmentedDesign, Family, Theta};
use crate::penalty::PenaltySpec;

/// `n_k × L` linear predictors of study `k`.
pub(crate) fn study_eta(aug: &AugmentedDesign<'_>, k: usize, beta: &[f64], gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let study = &aug.dataset().studies[k];
    let fixed = &study.x * DVector::from_column_slice(beta);
    let mut eta = aug.random_offsets(k, gamma);
    for (i, f) in fixed.iter().enumerate() {
        eta.row_mut(i).add_scalar_mut(*f);
    }
    eta
}

/// `Q1` on the total-sample scale.
pub fn q1_value(aug: &AugmentedDesign<'_>, theta: &Theta) -> f64 {
    let family = aug.dataset().family;
    let gamma = theta.gamma_matrix();
    let l = aug.draws_per_study() as f64;
    let mut total = 0.0;
    for (k, study) in aug.dataset().studies.iter().enumerate() {
        let eta = study_eta(aug, k, &theta.beta, &gamma);
        for i in 0..study.n() {
            let y = study.y[i];
            for v in eta.row(i).iter() {
                total -= family.log_density_unchecked(y, *v, theta.tau);
            }
        }
    }
    total / l
}

/// Per-draw totals `−Σ_k log f(y_k | α_kl)`; their mean is `Q1`.
pub(crate) fn q1_per_draw(aug: &AugmentedDesign<'_>, theta: &Theta) -> Vec<f64> {
    let family = aug.dataset().family;
    let gamma = theta.gamma_matrix();
    let mut per = vec![0.0; aug.draws_per_study()];
    for (k, study) in aug.dataset().studies.iter().enumerate() {
        let eta = study_eta(aug, k, &theta.beta, &gamma);
        for i in 0..study.n() {
            let y = study.y[i];
            for (l, v) in eta.row(i).iter().enumerate() {
                per[l] -= family.log_density_unchecked(y, *v, theta.tau);
            }
        }
    }
    per
}

/// `Q2 = −(1/L) Σ_l Σ_k log φ(α_kl)` with `φ` the standard normal density.
pub fn q2_value(draws: &[DMatrix<f64>]) -> f64 {
    let Some(first) = draws.first() else {
        return 0.0;
    };
    let l = first.nrows() as f64;
    let q = first.ncols() as f64;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for d in draws {
        total += 0.5 * d.norm_squared() + d.nrows() as f64 * q * half_log_2pi;
    }
    total / l
}

/// Gradient of `Q1` (total-sample scale) with respect to `β` and the flat `γ`.
pub fn q1_gradient(aug: &AugmentedDesign<'_>, theta: &Theta) -> (Vec<f64>, Vec<f64>) {
    let family = aug.dataset().family;
    let gamma = theta.gamma_matrix();
    let l = aug.draws_per_study() as f64;
    let p = theta.p();
    let q = theta.q();
    let mut gb = DVector::zeros(p);
    let mut gg = DMatrix::zeros(q, q);
    for (k, study) in aug.dataset().studies.iter().enumerate() {
        let mut e = study_eta(aug, k, &theta.beta, &gamma);
        for i in 0..study.n() {
            let y = study.y[i];
            for v in e.row_mut(i).iter_mut() {
                *v = family.neg_score(y, *v, theta.tau);
            }
        }
        let rbar = DVector::from_fn(study.n(), |i, _| e.row(i).sum());
        gb += study.x.transpose() * rbar;
        gg += aug.z(k).transpose() * (&e * &aug.draws()[k]);
    }
    let gb: Vec<f64> = gb.iter().map(|v| v / l).collect();
    let gg = aug
        .structure()
        .gamma_positions(q)
        .into_iter()
        .map(|(s, c)| gg[(s, c)] / l)
        .collect();
    (gb, gg)
}

/// Penalty on `β`, skipping unpenalized coordinates.
pub fn beta_penalty(beta: &[f64], spec: &PenaltySpec, unpenalized: &[usize]) -> f64 {
    beta.iter()
        .enumerate()
        .filter(|(j, _)| !unpenalized.contains(j))
        .map(|(_, b)| spec.value(*b))
        .sum()
}

/// Group penalty `Σ_t ρ(‖γ_t‖)`, skipping unpenalized groups.
pub fn gamma_penalty(gamma: &[Vec<f64>], spec: &PenaltySpec, unpenalized: &[usize]) -> f64 {
    gamma
        .iter()
        .enumerate()
        .filter(|(t, _)| !unpenalized.contains(t))
        .map(|(_, g)| spec.value(g.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .sum()
}

/// The penalized per-observation objective minimized by the M-steps:
/// `Q1/N + Σ_j ρ1(|β_j|) + Σ_t ρ2(‖γ_t‖)`.
pub fn penalized_objective(
    aug: &AugmentedDesign<'_>,
    theta: &Theta,
    beta_spec: &PenaltySpec,
    gamma_spec: &PenaltySpec,
    unpenalized_beta: &[usize],
    unpenalized_groups: &[usize],
) -> f64 {
    let n = aug.dataset().n_total() as f64;
    q1_value(aug, theta) / n
        + beta_penalty(&theta.beta, beta_spec, unpenalized_beta)
        + gamma_penalty(&theta.gamma, gamma_spec, unpenalized_groups)
}

/// Number of free parameters in the ICQ penalty: nonzero `β` and `γ`
/// entries, plus one for a free dispersion.
pub fn model_dimension(theta: &Theta, family: Family) -> usize {
    let b = theta.beta.iter().filter(|v| **v != 0.0).count();
    let g = theta.gamma.iter().flatten().filter(|v| **v != 0.0).count();
    b + g + usize::from(family.has_free_dispersion())
}
