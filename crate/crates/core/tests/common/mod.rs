//! Shared generators and independent reference computations for the
//! integration tests. Nothing here calls the solver code under test.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pglmm::model::{CovStructure, Family, MultiStudyDataset, StudyData, Theta};
use pglmm::penalty::{PenaltyKind, PenaltySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Studies with an intercept plus `p − 1` standard-normal predictors, random
/// effects on `z_columns`, and responses drawn from the model with a random
/// `β` and per-study `α ~ N(0, σ² I)`.
pub fn random_dataset(
    rng: &mut ChaCha8Rng,
    family: Family,
    sizes: &[usize],
    p: usize,
    z_columns: &[usize],
    beta: &[f64],
    sigma: f64,
) -> MultiStudyDataset {
    let studies = sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let alpha: Vec<f64> = z_columns.iter().map(|_| sigma * normal(rng)).collect();
            let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { 0.0 });
            let mut x = x;
            let mut y = DVector::zeros(n);
            for i in 0..n {
                for j in 1..p {
                    x[(i, j)] = normal(rng);
                }
                let mut eta: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
                eta += z_columns.iter().zip(&alpha).map(|(&j, a)| x[(i, j)] * a).sum::<f64>();
                y[i] = match family {
                    Family::Bernoulli => {
                        let u: f64 = rng.random();
                        f64::from(u < 1.0 / (1.0 + (-eta).exp()))
                    }
                    Family::Gaussian => eta + normal(rng),
                };
            }
            StudyData::new(format!("s{k}"), y, x, z_columns.to_vec()).unwrap()
        })
        .collect();
    let names = (0..p).map(|j| if j == 0 { "intercept".into() } else { format!("x{j}") }).collect();
    MultiStudyDataset::new(studies, names, family).unwrap()
}

pub fn random_theta(rng: &mut ChaCha8Rng, p: usize, q: usize, structure: CovStructure, tau: f64) -> Theta {
    let beta = (0..p).map(|_| 0.5 * normal(rng)).collect();
    let gamma = (0..q)
        .map(|t| match structure {
            CovStructure::Full => (0..=t).map(|s| if s == t { 0.3 + rng.random::<f64>() } else { 0.4 * normal(rng) }).collect(),
            CovStructure::Diagonal => vec![0.3 + rng.random::<f64>()],
        })
        .collect();
    Theta::new(beta, gamma, tau, structure).unwrap()
}

pub fn random_draws(rng: &mut ChaCha8Rng, k: usize, l: usize, q: usize) -> Vec<DMatrix<f64>> {
    (0..k).map(|_| DMatrix::from_fn(l, q, |_, _| normal(rng))).collect()
}

/// Dense lower-triangular `Γ` from groups, written out independently.
pub fn gamma_dense(theta: &Theta) -> DMatrix<f64> {
    let q = theta.gamma.len();
    let mut g = DMatrix::zeros(q, q);
    for (t, row) in theta.gamma.iter().enumerate() {
        match theta.structure {
            CovStructure::Full => {
                for (s, v) in row.iter().enumerate() {
                    g[(t, s)] = *v;
                }
            }
            CovStructure::Diagonal => g[(t, t)] = row[0],
        }
    }
    g
}

pub fn log_density(family: Family, y: f64, eta: f64, tau: f64) -> f64 {
    match family {
        Family::Bernoulli => {
            // y·η − log(1 + e^η), written via log1p of the smaller exponent.
            let log1pexp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            y * eta - log1pexp
        }
        Family::Gaussian => -(y - eta).powi(2) / (2.0 * tau) - 0.5 * (2.0 * std::f64::consts::PI * tau).ln(),
    }
}

/// `Q1 = −(1/L) Σ_l Σ_k Σ_i log f(y_ki | x'β + z'Γ α_kl)`, row by row.
pub fn oracle_q1(ds: &MultiStudyDataset, theta: &Theta, draws: &[DMatrix<f64>]) -> f64 {
    let g = gamma_dense(theta);
    let l = draws[0].nrows();
    let mut total = 0.0;
    for (s, d) in ds.studies.iter().zip(draws) {
        for i in 0..s.n() {
            let fixed: f64 = (0..s.p()).map(|j| s.x[(i, j)] * theta.beta[j]).sum();
            let z: Vec<f64> = s.z_columns.iter().map(|&j| s.x[(i, j)]).collect();
            for r in 0..l {
                let a = DVector::from_iterator(d.ncols(), d.row(r).iter().copied());
                let ga = &g * a;
                let rand: f64 = z.iter().zip(ga.iter()).map(|(u, v)| u * v).sum();
                total -= log_density(ds.family, s.y[i], fixed + rand, theta.tau);
            }
        }
    }
    total / l as f64
}

/// Proximal operator of `t·ρ` for MCP (any `t < ω`) and L1.
fn prox(kind: PenaltyKind, lambda: f64, omega: f64, t: f64, z: f64) -> f64 {
    let a = z.abs();
    let mag = match kind {
        PenaltyKind::L1 => (a - t * lambda).max(0.0),
        PenaltyKind::Mcp => {
            if a <= t * lambda {
                0.0
            } else if a <= omega * lambda {
                (a - t * lambda) / (1.0 - t / omega)
            } else {
                a
            }
        }
        PenaltyKind::Scad => panic!("reference solver covers MCP and L1 only"),
    };
    mag * z.signum()
}

/// Penalized logistic regression by plain proximal gradient descent on
/// `−(1/n) Σ log f + Σ_{j ∉ free} ρ(|β_j|)` with a fixed step `1/L`.
pub fn reference_penalized_logistic(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &PenaltySpec,
    free: &[usize],
    start: &[f64],
) -> Vec<f64> {
    let n = x.nrows() as f64;
    let lip = (x.transpose() * x).symmetric_eigenvalues().max() / (4.0 * n);
    let mut step = 1.0 / lip;
    if spec.kind == PenaltyKind::Mcp {
        step = step.min(0.9 * spec.omega);
    }
    let mut b = DVector::from_column_slice(start);
    for _ in 0..2_000_000 {
        let eta = x * &b;
        let resid = DVector::from_fn(y.len(), |i, _| 1.0 / (1.0 + (-eta[i]).exp()) - y[i]);
        let grad = x.transpose() * resid / n;
        let next = DVector::from_fn(b.len(), |j, _| {
            let z = b[j] - step * grad[j];
            if free.contains(&j) {
                z
            } else {
                prox(spec.kind, spec.lambda, spec.omega, step, z)
            }
        });
        let change = (&next - &b).amax();
        b = next;
        if change < 1e-13 {
            break;
        }
    }
    b.iter().copied().collect()
}

/// Ordinary least squares via the normal equations.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Vec<f64> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    xtx.cholesky().unwrap().solve(&xty).iter().copied().collect()
}
