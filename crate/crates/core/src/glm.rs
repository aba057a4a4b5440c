//! Penalized fixed-effects GLMs: the merged-data baseline, the per-study
//! baseline, and the `β` initializer of the mixed-model fit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::fit::mstep::{beta_gradient, newton_tau, solve_beta, BetaBlock, MStepOptions};
use crate::model::Family;
use crate::penalty::{PenaltyKind, PenaltySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub beta: Vec<f64>,
    pub tau: f64,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
}

impl GlmFit {
    /// Nonzero coefficients plus the free dispersion, if any.
    pub fn df(&self, family: Family) -> usize {
        self.beta.iter().filter(|b| **b != 0.0).count() + usize::from(family.has_free_dispersion())
    }

    pub fn bic(&self, family: Family, n: usize) -> f64 {
        -2.0 * self.loglik + self.df(family) as f64 * (n as f64).ln()
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &DVector<f64>, family: Family, unpenalized: &[usize]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(contract(format!("{} rows but {} responses", x.nrows(), y.len())));
    }
    if x.nrows() == 0 {
        return Err(contract("cannot fit a GLM to zero rows"));
    }
    if let Some(&j) = unpenalized.iter().find(|&&j| j >= x.ncols()) {
        return Err(contract(format!("unpenalized index {j} outside {} columns", x.ncols())));
    }
    for &v in y.iter() {
        family.validate_response(v)?;
    }
    Ok(())
}

pub fn glm_loglik(x: &DMatrix<f64>, y: &DVector<f64>, family: Family, beta: &[f64], tau: f64) -> f64 {
    let eta = x * DVector::from_column_slice(beta);
    eta.iter()
        .zip(y.iter())
        .map(|(e, v)| family.log_density_unchecked(*v, *e, tau))
        .sum()
}

/// Minimizes `−(1/n) Σ log f(y_i | x_iᵀβ) + Σ_{j penalized} ρ(|β_j|)`; for the
/// gaussian family the dispersion is minimized jointly with `β`.
pub fn fit_glm(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    penalty: &PenaltySpec,
    unpenalized: &[usize],
    init: Option<&[f64]>,
    opts: &MStepOptions,
) -> Result<GlmFit> {
    check_inputs(x, y, family, unpenalized)?;
    let p = x.ncols();
    let beta0 = match init {
        Some(b) if b.len() == p => b.to_vec(),
        Some(b) => return Err(contract(format!("initial beta has {} entries, expected {p}", b.len()))),
        None => vec![0.0; p],
    };
    let blocks = [BetaBlock {
        x,
        y,
        offsets: DMatrix::zeros(1, x.nrows()),
    }];
    let (beta, tau, converged, iterations) = match family {
        Family::Bernoulli => {
            let out = solve_beta(&blocks, family, 1.0, &beta0, penalty, unpenalized, opts);
            (out.value, 1.0, out.converged, out.iterations)
        }
        Family::Gaussian => {
            let mean = y.mean();
            let mut tau = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).max(1e-8);
            let mut beta = beta0;
            let mut iterations = 0;
            let mut converged = false;
            for _ in 0..200 {
                let out = solve_beta(&blocks, family, tau, &beta, penalty, unpenalized, opts);
                iterations += out.iterations;
                let resid = y - x * DVector::from_column_slice(&out.value);
                let s = resid.norm_squared() / y.len() as f64;
                let next = newton_tau(s, tau);
                let change = out
                    .value
                    .iter()
                    .zip(&beta)
                    .map(|(a, b)| (a - b).abs())
                    .fold((next - tau).abs(), f64::max);
                beta = out.value;
                tau = next;
                if change < opts.tol && out.converged {
                    converged = true;
                    break;
                }
            }
            (beta, tau, converged, iterations)
        }
    };
    let loglik = glm_loglik(x, y, family, &beta, tau);
    Ok(GlmFit {
        beta,
        tau,
        lambda: penalty.lambda,
        converged,
        iterations,
        loglik,
    })
}

/// Per-observation score of the penalized coordinates at the fit with every
/// penalized coefficient held at zero; the smallest `λ` that keeps them there.
pub fn glm_lambda_max(x: &DMatrix<f64>, y: &DVector<f64>, family: Family, unpenalized: &[usize]) -> Result<f64> {
    let null = fit_glm(
        x,
        y,
        family,
        &PenaltySpec::l1(f64::MAX),
        unpenalized,
        None,
        &MStepOptions::default(),
    )?;
    let blocks = [BetaBlock {
        x,
        y,
        offsets: DMatrix::zeros(1, x.nrows()),
    }];
    let g = beta_gradient(&blocks, family, null.tau, &null.beta);
    Ok((0..x.ncols())
        .filter(|j| !unpenalized.contains(j))
        .map(|j| g[j].abs())
        .fold(0.0, f64::max))
}

/// `n` values log-spaced from `max` down to `min_ratio · max`.
pub fn log_spaced(max: f64, min_ratio: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![max],
        _ => (0..n)
            .map(|i| max * min_ratio.powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BicPath {
    pub lambdas: Vec<f64>,
    pub fits: Vec<GlmFit>,
    pub bic: Vec<f64>,
    /// Index of the smallest BIC; ties go to the larger `λ`.
    pub best: usize,
}

impl BicPath {
    pub fn best_fit(&self) -> &GlmFit {
        &self.fits[self.best]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicSettings {
    pub kind: PenaltyKind,
    pub omega: f64,
    pub n_lambda: usize,
    pub min_ratio: f64,
}

impl Default for BicSettings {
    fn default() -> Self {
        BicSettings {
            kind: PenaltyKind::Mcp,
            omega: 3.0,
            n_lambda: 30,
            min_ratio: 0.01,
        }
    }
}

/// Warm-started path over descending `λ`, scored by BIC.
pub fn bic_path(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    settings: &BicSettings,
    unpenalized: &[usize],
    opts: &MStepOptions,
) -> Result<BicPath> {
    if settings.n_lambda == 0 {
        return Err(contract("a BIC path needs at least one lambda"));
    }
    let lmax = glm_lambda_max(x, y, family, unpenalized)?.max(1e-8);
    let lambdas = log_spaced(lmax, settings.min_ratio, settings.n_lambda);
    let mut fits: Vec<GlmFit> = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let spec = PenaltySpec::new(settings.kind, lambda, settings.omega)?;
        let init = fits.last().map(|f| f.beta.clone());
        fits.push(fit_glm(x, y, family, &spec, unpenalized, init.as_deref(), opts)?);
    }
    let bic: Vec<f64> = fits.iter().map(|f| f.bic(family, x.nrows())).collect();
    let best = bic
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v < bic[b] { i } else { b });
    Ok(BicPath {
        lambdas,
        fits,
        bic,
        best,
    })
}

/// Inverse-link predictions `g⁻¹(Xβ)`.
pub fn predict_mean(x: &DMatrix<f64>, beta: &[f64], family: Family) -> Result<Vec<f64>> {
    if x.ncols() != beta.len() {
        return Err(contract(format!(
            "new data has {} columns, model has {}",
            x.ncols(),
            beta.len()
        )));
    }
    let eta = x * DVector::from_column_slice(beta);
    Ok(eta.iter().map(|e| family.mean(*e)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_unpenalized_is_least_squares() {
        let x = DMatrix::from_row_slice(5, 2, &[1., 0., 1., 1., 1., 2., 1., 3., 1., 4.]);
        let y = DVector::from_vec(vec![1.0, 2.9, 5.1, 7.0, 9.2]);
        let fit = fit_glm(&x, &y, Family::Gaussian, &PenaltySpec::mcp(0.0), &[0], None, &MStepOptions::default()).unwrap();
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        assert_abs_diff_eq!(fit.beta[0], ols[0], epsilon = 1e-7);
        assert_abs_diff_eq!(fit.beta[1], ols[1], epsilon = 1e-7);
        let resid = &y - &x * ols;
        assert_abs_diff_eq!(fit.tau, resid.norm_squared() / 5.0, epsilon = 1e-7);
    }

    #[test]
    fn intercept_only_bernoulli_is_logit_of_mean() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0.3, 1., -1.0, 1., 2.0, 1., 0.1]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0]);
        let fit = fit_glm(&x, &y, Family::Bernoulli, &PenaltySpec::mcp(100.0), &[0], None, &MStepOptions::default()).unwrap();
        assert_eq!(fit.beta[1], 0.0);
        assert_abs_diff_eq!(fit.beta[0], (0.75f64 / 0.25).ln(), epsilon = 1e-7);
    }

    #[test]
    fn lambda_max_zeroes_penalized_coordinates() {
        let x = DMatrix::from_row_slice(6, 3, &[1., 0.3, 1.2, 1., -1.0, 0.1, 1., 2.0, -0.4, 1., 0.1, 0.9, 1., -0.6, -1.1, 1., 1.4, 0.2]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let lmax = glm_lambda_max(&x, &y, Family::Bernoulli, &[0]).unwrap();
        let at = fit_glm(&x, &y, Family::Bernoulli, &PenaltySpec::mcp(lmax * 1.0001), &[0], None, &MStepOptions::default()).unwrap();
        assert_eq!(&at.beta[1..], &[0.0, 0.0]);
        let below = fit_glm(&x, &y, Family::Bernoulli, &PenaltySpec::mcp(lmax * 0.9), &[0], None, &MStepOptions::default()).unwrap();
        assert!(below.beta[1..].iter().any(|b| *b != 0.0));
    }

    #[test]
    fn predictions_use_inverse_link() {
        let x = DMatrix::from_row_slice(2, 3, &[1., 0., 0., 1., 1., 1.]);
        let p = predict_mean(&x, &[0.0, 2.0, 2.0], Family::Bernoulli).unwrap();
        assert_eq!(p[0], 0.5);
        assert_abs_diff_eq!(p[1], 0.982013790037908, epsilon = 1e-12);
        assert!(predict_mean(&x, &[0.0, 1.0], Family::Bernoulli).is_err());
    }

    #[test]
    fn log_spacing() {
        let v = log_spaced(1.0, 0.01, 3);
        assert_abs_diff_eq!(v[1], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], 0.01, epsilon = 1e-15);
    }
}
