//! The three conditional minimization steps for `β`, `γ` and `τ`, each run on
//! the augmented design of a fixed set of posterior draws.
//!
//! `β` and `γ` use proximal Newton steps on the Monte Carlo loss `Q1/N`: the
//! exact Hessian over the augmented rows defines a quadratic model, the model
//! plus the penalty is minimized by (block) coordinate descent with the
//! proximal maps of [`crate::penalty`], and a halving line search keeps the
//! penalized objective from increasing.

use log::warn;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{AugmentedDesign, Family, Theta};
use crate::penalty::{group_prox_unchecked, PenaltySpec};

/// Smallest dispersion returned by the `τ` step.
pub const TAU_FLOOR: f64 = 1e-8;

/// Margin by which a coordinate curvature is kept above the penalty's
/// convexity threshold.
const CURVATURE_MARGIN: f64 = 1.05;

/// Draws per study used to form the `γ` Hessian.
const HESSIAN_DRAWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MStepOptions {
    /// Newton iterations.
    pub max_outer: usize,
    /// Coordinate sweeps per quadratic model.
    pub max_inner: usize,
    /// Stop once no coordinate moves by more than this.
    pub tol: f64,
}

impl Default for MStepOptions {
    fn default() -> Self {
        MStepOptions {
            max_outer: 500,
            max_inner: 1000,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome<T> {
    pub value: T,
    pub converged: bool,
    pub iterations: usize,
}

/// Result of the `γ` step: groups after sign reflection, and the columns of
/// `Γ` that were flipped to make the diagonal nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaStep {
    pub gamma: Vec<Vec<f64>>,
    pub flipped: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// One study's rows for the `β` problem: predictors, responses, and the
/// `L × n` matrix of known offsets (column `i` holds subject `i`'s draws).
pub(crate) struct BetaBlock<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub offsets: DMatrix<f64>,
}

fn check_dims(aug: &AugmentedDesign<'_>, theta: &Theta) -> Result<()> {
    let ds = aug.dataset();
    if theta.p() != ds.p() || theta.q() != ds.q() || theta.structure != aug.structure() {
        return Err(contract(format!(
            "theta (p={}, q={}, {}) does not match the design (p={}, q={}, {})",
            theta.p(),
            theta.q(),
            theta.structure,
            ds.p(),
            ds.q(),
            aug.structure()
        )));
    }
    Ok(())
}

fn coordinate_curvature(h: f64, spec: &PenaltySpec, penalized: bool) -> f64 {
    let h = h.max(1e-12);
    if penalized && spec.lambda > 0.0 {
        h.max(CURVATURE_MARGIN * spec.min_curvature())
    } else {
        h
    }
}

pub(crate) fn beta_blocks<'a>(aug: &AugmentedDesign<'a>, gamma: &DMatrix<f64>) -> Vec<BetaBlock<'a>> {
    aug.dataset()
        .studies
        .iter()
        .enumerate()
        .map(|(k, s)| BetaBlock {
            x: &s.x,
            y: &s.y,
            offsets: aug.random_offsets(k, gamma).transpose(),
        })
        .collect()
}

/// Per-observation gradient of the loss in `β`.
pub(crate) fn beta_gradient(blocks: &[BetaBlock<'_>], family: Family, tau: f64, beta: &[f64]) -> DVector<f64> {
    let p = beta.len();
    let b = DVector::from_column_slice(beta);
    let mut g = DVector::zeros(p);
    let mut n_total = 0usize;
    for blk in blocks {
        let f = blk.x * &b;
        let l = blk.offsets.nrows() as f64;
        let rbar = DVector::from_fn(blk.x.nrows(), |i, _| {
            let (y, fi) = (blk.y[i], f[i]);
            blk.offsets
                .column(i)
                .iter()
                .map(|o| family.neg_score(y, fi + o, tau))
                .sum::<f64>()
                / l
        });
        g += blk.x.tr_mul(&rbar);
        n_total += blk.x.nrows();
    }
    g / n_total as f64
}

/// Smooth part of an M-step problem at one point.
struct SmoothEval {
    loss: f64,
    grad: Vec<f64>,
    /// Empty unless requested.
    hess: DMatrix<f64>,
}

/// Proximal Newton over blocks of coordinates.
///
/// Each iteration minimizes the second-order model of the smooth loss plus
/// the (group) penalty by block coordinate descent, then halves the step
/// until the penalized objective does not increase. Block curvatures are the
/// Gershgorin bounds of the Hessian blocks, raised above the penalty's
/// convexity threshold on penalized blocks.
fn prox_newton(
    x0: Vec<f64>,
    groups: &[Range<usize>],
    penalized: &[bool],
    spec: &PenaltySpec,
    opts: &MStepOptions,
    eval: impl Fn(&[f64], bool) -> SmoothEval,
) -> MStepOutcome<Vec<f64>> {
    let penalty = |x: &[f64]| -> f64 {
        groups
            .iter()
            .zip(penalized)
            .filter(|(_, p)| **p)
            .map(|(r, _)| spec.value(x[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt()))
            .sum()
    };
    let m = x0.len();
    let mut x = x0;
    let mut cur = eval(&x, true);
    let mut h = std::mem::replace(&mut cur.hess, DMatrix::zeros(0, 0));
    let mut f_cur = cur.loss + penalty(&x);
    let mut converged = false;
    let mut iterations = 0;
    let mut hd = DVector::zeros(m);
    let mut zeta = Vec::new();
    while iterations < opts.max_outer {
        iterations += 1;
        if iterations > 1 {
            h = eval(&x, true).hess;
        }
        let v: Vec<f64> = groups
            .iter()
            .zip(penalized)
            .map(|(r, &pen)| {
                let gersh = r
                    .clone()
                    .map(|a| r.clone().map(|b| h[(a, b)].abs()).sum::<f64>())
                    .fold(0.0, f64::max);
                coordinate_curvature(gersh, spec, pen)
            })
            .collect();
        let mut b = x.clone();
        hd.fill(0.0);
        for _ in 0..opts.max_inner {
            let mut change = 0.0f64;
            for (t, range) in groups.iter().enumerate() {
                zeta.clear();
                zeta.extend(range.clone().map(|g| v[t] * b[g] - (cur.grad[g] + hd[g])));
                let new: Vec<f64> = if penalized[t] {
                    group_prox_unchecked(spec, &zeta, v[t])
                } else {
                    zeta.iter().map(|z| z / v[t]).collect()
                };
                for (g, nv) in range.clone().zip(new) {
                    let delta = nv - b[g];
                    if delta != 0.0 {
                        hd.axpy(delta, &h.column(g), 1.0);
                        b[g] = nv;
                        change = change.max(delta.abs());
                    }
                }
            }
            if change < 0.1 * opts.tol {
                break;
            }
        }

        let dir: Vec<f64> = b.iter().zip(&x).map(|(a, c)| a - c).collect();
        let full = dir.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        if full < opts.tol {
            converged = true;
            break;
        }
        let slack = 1e-13 * f_cur.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        while t * full >= 0.01 * opts.tol {
            let cand: Vec<f64> = if t == 1.0 {
                b.clone()
            } else {
                x.iter().zip(&dir).map(|(a, d)| a + t * d).collect()
            };
            let e = eval(&cand, false);
            let f = e.loss + penalty(&cand);
            if f <= f_cur + slack {
                accepted = Some((cand, e, f));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, e, f)) = accepted else {
            converged = true;
            break;
        };
        x = cand;
        cur = e;
        f_cur = f;

        if t * full < opts.tol {
            converged = true;
            break;
        }
    }
    MStepOutcome {
        value: x,
        converged,
        iterations,
    }
}

/// Per-observation loss, gradient and Hessian of the `β` problem.
fn beta_eval(blocks: &[BetaBlock<'_>], family: Family, tau: f64, beta: &[f64], with_hess: bool) -> SmoothEval {
    let p = beta.len();
    let b = DVector::from_column_slice(beta);
    let n_total: usize = blocks.iter().map(|blk| blk.x.nrows()).sum();
    let mut loss = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = if with_hess { DMatrix::zeros(p, p) } else { DMatrix::zeros(0, 0) };
    for blk in blocks {
        let n = blk.x.nrows();
        let f = blk.x * &b;
        let l = blk.offsets.nrows() as f64;
        let mut sbar = DVector::zeros(n);
        let mut root_w = DVector::zeros(n);
        for i in 0..n {
            let (mut lo, mut sc, mut w) = (0.0, 0.0, 0.0);
            for o in blk.offsets.column(i).iter() {
                let (a, b, c) = family.loss_terms(blk.y[i], f[i] + o, tau);
                lo += a;
                sc += b;
                w += c;
            }
            loss += lo / l;
            sbar[i] = sc / l;
            root_w[i] = (w / l).sqrt();
        }
        grad += blk.x.tr_mul(&sbar);
        if !with_hess {
            continue;
        }
        let mut xs = blk.x.clone();
        for (i, mut row) in xs.row_iter_mut().enumerate() {
            row *= root_w[i];
        }
        hess += xs.tr_mul(&xs);
    }
    let scale = 1.0 / n_total as f64;
    SmoothEval {
        loss: loss * scale,
        grad: (grad * scale).iter().copied().collect(),
        hess: hess * scale,
    }
}

/// Minimizes the per-observation loss plus `Σ ρ(|β_j|)` over `β`, with the
/// random-effect contributions held fixed as offsets.
pub(crate) fn solve_beta(
    blocks: &[BetaBlock<'_>],
    family: Family,
    tau: f64,
    beta0: &[f64],
    spec: &PenaltySpec,
    unpenalized: &[usize],
    opts: &MStepOptions,
) -> MStepOutcome<Vec<f64>> {
    let p = beta0.len();
    let groups: Vec<Range<usize>> = (0..p).map(|j| j..j + 1).collect();
    let penalized: Vec<bool> = (0..p).map(|j| !unpenalized.contains(&j)).collect();
    prox_newton(beta0.to_vec(), &groups, &penalized, spec, opts, |b, h| {
        beta_eval(blocks, family, tau, b, h)
    })
}

/// Conditional minimization of `Q1/N + Σ ρ1(|β_j|)` over `β`, holding `γ`
/// and `τ` at `theta`'s values. Starts from `theta.beta`.
pub fn mstep_beta(
    aug: &AugmentedDesign<'_>,
    theta: &Theta,
    penalty: &PenaltySpec,
    unpenalized: &[usize],
    opts: &MStepOptions,
) -> Result<MStepOutcome<Vec<f64>>> {
    check_dims(aug, theta)?;
    if let Some(&j) = unpenalized.iter().find(|&&j| j >= theta.p()) {
        return Err(contract(format!("unpenalized index {j} outside {} predictors", theta.p())));
    }
    let blocks = beta_blocks(aug, &theta.gamma_matrix());
    Ok(solve_beta(
        &blocks,
        aug.dataset().family,
        theta.tau,
        &theta.beta,
        penalty,
        unpenalized,
        opts,
    ))
}

/// Largest violation of the stationarity conditions of the `β` problem.
pub fn kkt_violation_beta(
    aug: &AugmentedDesign<'_>,
    theta: &Theta,
    penalty: &PenaltySpec,
    unpenalized: &[usize],
) -> f64 {
    let blocks = beta_blocks(aug, &theta.gamma_matrix());
    let g = beta_gradient(&blocks, aug.dataset().family, theta.tau, &theta.beta);
    theta
        .beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            if unpenalized.contains(&j) {
                g[j].abs()
            } else if b != 0.0 {
                (g[j] + b.signum() * penalty.derivative(b)).abs()
            } else {
                (g[j].abs() - penalty.lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Fixed pieces of the `γ` problem for one set of draws.
struct GammaProblem<'a, 'b> {
    aug: &'b AugmentedDesign<'a>,
    fixed: Vec<DVector<f64>>,
    positions: Vec<(usize, usize)>,
    family: Family,
    tau: f64,
    scale: f64,
}

impl<'a, 'b> GammaProblem<'a, 'b> {
    fn new(aug: &'b AugmentedDesign<'a>, theta: &Theta) -> Self {
        let ds = aug.dataset();
        let beta = DVector::from_column_slice(&theta.beta);
        GammaProblem {
            aug,
            fixed: ds.studies.iter().map(|s| &s.x * &beta).collect(),
            positions: theta.structure.gamma_positions(theta.q()),
            family: ds.family,
            tau: theta.tau,
            scale: 1.0 / (ds.n_total() as f64 * aug.draws_per_study() as f64),
        }
    }

    fn gamma_matrix(&self, flat: &[f64], q: usize) -> DMatrix<f64> {
        let mut gm = DMatrix::zeros(q, q);
        for (g, &(s, c)) in self.positions.iter().enumerate() {
            gm[(s, c)] = flat[g];
        }
        gm
    }

    fn gradient(&self, flat: &[f64], q: usize) -> Vec<f64> {
        let gm = self.gamma_matrix(flat, q);
        let mut acc = DMatrix::zeros(q, q);
        for (k, study) in self.aug.dataset().studies.iter().enumerate() {
            let mut e = self.aug.random_offsets(k, &gm);
            for i in 0..study.n() {
                let (y, f) = (study.y[i], self.fixed[k][i]);
                for v in e.row_mut(i).iter_mut() {
                    *v = self.family.neg_score(y, f + *v, self.tau);
                }
            }
            acc += self.aug.z(k).tr_mul(&(&e * &self.aug.draws()[k]));
        }
        self.positions
            .iter()
            .map(|&(s, c)| acc[(s, c)] * self.scale)
            .collect()
    }

    /// Loss, gradient and Hessian. The Hessian is `U'U` with rows
    /// `√w_il · (z_is a_lc)`, estimated from an evenly thinned subset of at
    /// most [`HESSIAN_DRAWS`] draws per study; the line search keeps steps
    /// monotone whatever its accuracy.
    fn eval(&self, flat: &[f64], q: usize, with_hess: bool) -> SmoothEval {
        let gm = self.gamma_matrix(flat, q);
        let m = self.positions.len();
        let mut loss = 0.0;
        let mut acc = DMatrix::zeros(q, q);
        let mut hess = if with_hess { DMatrix::zeros(m, m) } else { DMatrix::zeros(0, 0) };
        for (k, study) in self.aug.dataset().studies.iter().enumerate() {
            let n = study.n();
            let a = &self.aug.draws()[k];
            let z = self.aug.z(k);
            let l = a.nrows();
            let mut e = self.aug.random_offsets(k, &gm);
            let mut root_w = DMatrix::zeros(l, n);
            for i in 0..n {
                let (y, f) = (study.y[i], self.fixed[k][i]);
                for j in 0..l {
                    let (lo, sc, w) = self.family.loss_terms(y, f + e[(i, j)], self.tau);
                    loss += lo;
                    e[(i, j)] = sc;
                    root_w[(j, i)] = w.sqrt();
                }
            }
            acc += z.tr_mul(&(&e * a));
            if !with_hess {
                continue;
            }
            let used: Vec<usize> = (0..l).step_by(l.div_ceil(HESSIAN_DRAWS)).collect();
            let mut ut = DMatrix::zeros(m, n * used.len());
            let mut col_idx = 0;
            for i in 0..n {
                for &j in &used {
                    let rw = root_w[(j, i)];
                    let mut col = ut.column_mut(col_idx);
                    for (g, &(s, c)) in self.positions.iter().enumerate() {
                        col[g] = rw * z[(i, s)] * a[(j, c)];
                    }
                    col_idx += 1;
                }
            }
            hess.gemm(l as f64 / used.len() as f64, &ut, &ut.transpose(), 1.0);
        }
        SmoothEval {
            loss: loss * self.scale,
            grad: self.positions.iter().map(|&(s, c)| acc[(s, c)] * self.scale).collect(),
            hess: hess * self.scale,
        }
    }
}

/// Raw `γ` minimizer (no sign reflection).
pub(crate) fn solve_gamma(
    aug: &AugmentedDesign<'_>,
    theta: &Theta,
    spec: &PenaltySpec,
    unpenalized_groups: &[usize],
    opts: &MStepOptions,
) -> MStepOutcome<Vec<f64>> {
    let q = theta.q();
    let structure = theta.structure;
    let problem = GammaProblem::new(aug, theta);
    let groups: Vec<Range<usize>> = (0..q).map(|t| structure.group_range(t)).collect();
    let penalized: Vec<bool> = (0..q).map(|t| !unpenalized_groups.contains(&t)).collect();
    prox_newton(theta.flat_gamma(), &groups, &penalized, spec, opts, |g, h| problem.eval(g, q, h))
}

/// Conditional minimization of `Q1/N + Σ_t ρ2(‖γ_t‖)` over `γ`, holding `β`
/// and `τ`. Columns of `Γ` with a negative diagonal are then sign-flipped;
/// the caller must flip the same coordinates of any random-effect draws it
/// keeps, which leaves every linear predictor unchanged.
pub fn mstep_gamma(
    aug: &AugmentedDesign<'_>,
    theta: &Theta,
    penalty: &PenaltySpec,
    unpenalized_groups: &[usize],
    opts: &MStepOptions,
) -> Result<GammaStep> {
    check_dims(aug, theta)?;
    let out = solve_gamma(aug, theta, penalty, unpenalized_groups, opts);
    let mut next = theta.clone();
    next.set_flat_gamma(&out.value);
    let flipped = next.reflect_signs();
    Ok(GammaStep {
        gamma: next.gamma,
        flipped,
        converged: out.converged,
        iterations: out.iterations,
    })
}

/// Largest violation of the group stationarity conditions of the `γ` problem.
pub fn kkt_violation_gamma(
    aug: &AugmentedDesign<'_>,
    theta: &Theta,
    penalty: &PenaltySpec,
    unpenalized_groups: &[usize],
) -> f64 {
    let problem = GammaProblem::new(aug, theta);
    let flat = theta.flat_gamma();
    let grad = problem.gradient(&flat, theta.q());
    (0..theta.q())
        .map(|t| {
            let r = theta.structure.group_range(t);
            let g: Vec<f64> = grad[r.clone()].to_vec();
            let b: Vec<f64> = flat[r].to_vec();
            let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if unpenalized_groups.contains(&t) {
                gnorm
            } else if norm > 0.0 {
                let d = penalty.derivative(norm) / norm;
                g.iter()
                    .zip(&b)
                    .map(|(gi, bi)| (gi + d * bi).powi(2))
                    .sum::<f64>()
                    .sqrt()
            } else {
                (gnorm - penalty.lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Mean squared augmented residual `(1/(NL)) Σ (y − η)²`.
pub(crate) fn mean_squared_residual(aug: &AugmentedDesign<'_>, theta: &Theta) -> f64 {
    let gamma = theta.gamma_matrix();
    let mut total = 0.0;
    for (k, study) in aug.dataset().studies.iter().enumerate() {
        let eta = super::objective::study_eta(aug, k, &theta.beta, &gamma);
        for i in 0..study.n() {
            let y = study.y[i];
            total += eta.row(i).iter().map(|e| (y - e).powi(2)).sum::<f64>();
        }
    }
    total / aug.n_rows() as f64
}

/// Newton's method in `u = log τ` on `S e^{−u}/2 + u/2`, the per-row gaussian
/// loss as a function of the dispersion. The minimizer is `τ = S`.
pub(crate) fn newton_tau(s: f64, tau0: f64) -> f64 {
    if !(s > TAU_FLOOR) {
        warn!("residual variance {s:e} is at or below the floor; tau set to {TAU_FLOOR:e}");
        return TAU_FLOOR;
    }
    let mut u = if tau0 > 0.0 && tau0.is_finite() { tau0.ln() } else { s.ln() };
    for _ in 0..200 {
        let e = s * (-u).exp();
        let step = ((1.0 - e) / e).clamp(-2.0, 2.0);
        u -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    u.exp()
}

/// Conditional minimization over `τ`; the bernoulli dispersion is fixed at 1.
pub fn mstep_tau(aug: &AugmentedDesign<'_>, theta: &Theta) -> Result<f64> {
    check_dims(aug, theta)?;
    match aug.dataset().family {
        Family::Bernoulli => Ok(1.0),
        Family::Gaussian => Ok(newton_tau(mean_squared_residual(aug, theta), theta.tau)),
    }
}
