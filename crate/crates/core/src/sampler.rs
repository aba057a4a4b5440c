//! Coordinate-wise independence Metropolis sampler for the random effects of
//! one study, targeting `f(y_k | X_k, α_k; θ) φ(α_k)` with `φ` the standard
//! normal density.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{Family, StudyData, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of retained draws `L`.
    pub draws: usize,
    /// Sweeps discarded before the first retained draw.
    pub burnin: usize,
    /// Keep every `thin`-th sweep.
    pub thin: usize,
    /// Standard deviation of the independent normal candidate.
    pub proposal_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            draws: 100,
            burnin: 200,
            thin: 1,
            proposal_scale: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(contract("sampler needs at least one draw"));
        }
        if self.thin == 0 {
            return Err(contract("thinning stride must be at least 1"));
        }
        if !(self.proposal_scale > 0.0 && self.proposal_scale.is_finite()) {
            return Err(contract(format!(
                "proposal scale must be positive, got {}",
                self.proposal_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    /// Fraction of accepted candidates per coordinate, over every sweep.
    pub acceptance: Vec<f64>,
    /// Total sweeps run, burn-in included.
    pub chain_length: usize,
}

/// Draws plus the final chain state, used to warm-start the next E-step.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub draws: DMatrix<f64>,
    pub diagnostics: SamplerDiagnostics,
    pub last_state: Vec<f64>,
}

/// `L × q` posterior draws of `α_k`, chain started at zero.
pub fn sample_posterior(
    study: &StudyData,
    family: Family,
    theta: &Theta,
    config: &SamplerConfig,
) -> Result<(DMatrix<f64>, SamplerDiagnostics)> {
    let s = run_chain(study, family, theta, config, None)?;
    Ok((s.draws, s.diagnostics))
}

/// As [`sample_posterior`], optionally starting from `start`.
pub fn run_chain(
    study: &StudyData,
    family: Family,
    theta: &Theta,
    config: &SamplerConfig,
    start: Option<&[f64]>,
) -> Result<PosteriorSample> {
    config.validate()?;
    let q = theta.q();
    if study.p() != theta.p() || study.q() != q {
        return Err(contract(format!(
            "study '{}' has p={}, q={} but theta has p={}, q={q}",
            study.id,
            study.p(),
            study.q(),
            theta.p()
        )));
    }
    let mut alpha = match start {
        Some(a) if a.len() == q => a.to_vec(),
        Some(a) => {
            return Err(contract(format!(
                "warm start has {} coordinates, q = {q}",
                a.len()
            )))
        }
        None => vec![0.0; q],
    };

    let n = study.n();
    let tau = theta.tau;
    // Column j of W = ZΓ is the change in η per unit change in α_j.
    let w = study.z_matrix() * theta.gamma_matrix();
    let mut eta: DVector<f64> = &study.x * DVector::from_column_slice(&theta.beta) + &w * DVector::from_column_slice(&alpha);
    let y = &study.y;

    let loglik = |eta: &DVector<f64>| -> f64 {
        (0..n)
            .map(|i| family.log_density_unchecked(y[i], eta[i], tau))
            .sum()
    };
    let mut ll = loglik(&eta);
    if !ll.is_finite() {
        return Err(Error::SamplerInit {
            study: study.id.clone(),
            reason: format!("initial log-likelihood is {ll}"),
        });
    }

    let active: Vec<bool> = (0..q).map(|j| w.column(j).iter().any(|&v| v != 0.0)).collect();
    let scale = config.proposal_scale;
    let inv_s2 = 1.0 / (scale * scale);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sweeps = config.burnin + config.draws * config.thin;
    let mut accepted = vec![0usize; q];
    let mut draws = DMatrix::zeros(config.draws, q);
    let mut kept = 0;
    let mut cand_eta = eta.clone();

    for sweep in 0..sweeps {
        for j in 0..q {
            let z: f64 = rng.sample(StandardNormal);
            let cand = scale * z;
            let u: f64 = rng.random();
            let old = alpha[j];
            let d2 = cand * cand - old * old;
            let prior_and_proposal = -0.5 * d2 + 0.5 * d2 * inv_s2;
            let (new_ll, log_a) = if active[j] {
                let delta = cand - old;
                let wj = w.column(j);
                let mut s = 0.0;
                for i in 0..n {
                    let e = eta[i] + delta * wj[i];
                    cand_eta[i] = e;
                    s += family.log_density_unchecked(y[i], e, tau);
                }
                (s, s - ll + prior_and_proposal)
            } else {
                (ll, prior_and_proposal)
            };
            if log_a >= 0.0 || u.ln() < log_a {
                alpha[j] = cand;
                if active[j] {
                    std::mem::swap(&mut eta, &mut cand_eta);
                    ll = new_ll;
                }
                accepted[j] += 1;
            }
        }
        if sweep >= config.burnin && (sweep - config.burnin) % config.thin == config.thin - 1 {
            for j in 0..q {
                draws[(kept, j)] = alpha[j];
            }
            kept += 1;
        }
    }
    debug_assert_eq!(kept, config.draws);

    Ok(PosteriorSample {
        draws,
        diagnostics: SamplerDiagnostics {
            acceptance: accepted.iter().map(|&a| a as f64 / sweeps as f64).collect(),
            chain_length: sweeps,
        },
        last_state: alpha,
    })
}

/// Per-study seed: the base seed mixed with a hash of the study id and the EM
/// iteration, so results do not depend on study order or scheduling.
pub fn study_seed(base: u64, study_id: &str, iteration: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in study_id.bytes().chain(iteration.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    base ^ splitmix64(h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CovStructure;

    fn intercept_study(id: &str, y: Vec<f64>) -> StudyData {
        let n = y.len();
        StudyData::new(id, DVector::from_vec(y), DMatrix::from_element(n, 1, 1.0), vec![0]).unwrap()
    }

    fn theta1(beta: f64, gamma: f64, tau: f64) -> Theta {
        Theta::new(vec![beta], vec![vec![gamma]], tau, CovStructure::Full).unwrap()
    }

    /// Batch-means standard error of the mean of `x`.
    fn batch_se(x: &[f64]) -> f64 {
        let b = 50;
        let m = x.len() / b;
        let means: Vec<f64> = (0..b).map(|i| x[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64).collect();
        let mu = means.iter().sum::<f64>() / b as f64;
        let var = means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (b - 1) as f64;
        (var / b as f64).sqrt()
    }

    #[test]
    fn prior_only_study_samples_the_prior() {
        let study = StudyData::new("empty", DVector::zeros(0), DMatrix::zeros(0, 2), vec![0, 1]).unwrap();
        let theta = Theta::initial(2, 2, CovStructure::Full, 1.0);
        let cfg = SamplerConfig {
            draws: 10_000,
            seed: 9,
            ..Default::default()
        };
        let (draws, _) = sample_posterior(&study, Family::Bernoulli, &theta, &cfg).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = draws.column(j).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(mean.abs() < 4.0 / 100.0, "mean {mean}");
            assert!((var - 1.0).abs() < 0.15, "var {var}");
        }
    }

    #[test]
    fn conjugate_gaussian_posterior() {
        let y = vec![1.3, 0.4, 2.2, 1.9, 0.8];
        let (beta, gamma, tau) = (0.5, 0.6, 1.0);
        let study = intercept_study("g", y.clone());
        let cfg = SamplerConfig {
            draws: 40_000,
            seed: 4,
            ..Default::default()
        };
        let (draws, diag) = sample_posterior(&study, Family::Gaussian, &theta1(beta, gamma, tau), &cfg).unwrap();
        let precision = 1.0 + y.len() as f64 * gamma * gamma / tau;
        let post_mean = gamma / tau * y.iter().map(|v| v - beta).sum::<f64>() / precision;
        let post_var = 1.0 / precision;

        let a: Vec<f64> = draws.column(0).iter().copied().collect();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - post_mean).abs() < 3.0 * batch_se(&a), "{mean} vs {post_mean}");
        let sq: Vec<f64> = a.iter().map(|v| (v - post_mean).powi(2)).collect();
        let var = sq.iter().sum::<f64>() / sq.len() as f64;
        assert!((var - post_var).abs() < 3.0 * batch_se(&sq), "{var} vs {post_var}");
        assert!(diag.acceptance[0] > 0.0 && diag.acceptance[0] < 1.0);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let study = intercept_study("s", vec![1.0, 0.0, 1.0, 1.0]);
        let theta = theta1(0.2, 0.9, 1.0);
        let cfg = SamplerConfig {
            draws: 500,
            seed: 123,
            ..Default::default()
        };
        let a = sample_posterior(&study, Family::Bernoulli, &theta, &cfg).unwrap();
        let b = sample_posterior(&study, Family::Bernoulli, &theta, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn thinning_and_burnin_set_chain_length() {
        let study = intercept_study("s", vec![1.0, 0.0]);
        let cfg = SamplerConfig {
            draws: 7,
            burnin: 5,
            thin: 3,
            ..Default::default()
        };
        let (d, diag) = sample_posterior(&study, Family::Bernoulli, &theta1(0.0, 1.0, 1.0), &cfg).unwrap();
        assert_eq!(d.nrows(), 7);
        assert_eq!(diag.chain_length, 26);
    }

    #[test]
    fn non_finite_start_is_an_initialization_error() {
        let study = intercept_study("bad", vec![1.0]);
        let theta = theta1(0.0, 1.0, 1.0);
        let err = run_chain(&study, Family::Gaussian, &theta, &SamplerConfig::default(), Some(&[f64::INFINITY]));
        assert!(matches!(err, Err(Error::SamplerInit { .. })));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let study = intercept_study("s", vec![1.0]);
        let cfg = SamplerConfig {
            draws: 0,
            ..Default::default()
        };
        assert!(sample_posterior(&study, Family::Bernoulli, &theta1(0.0, 1.0, 1.0), &cfg).is_err());
    }

    #[test]
    fn distinct_study_seeds_give_uncorrelated_chains() {
        let a = intercept_study("alpha", vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let b = intercept_study("beta", vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let theta = theta1(0.1, 1.0, 1.0);
        let run = |s: &StudyData| {
            let cfg = SamplerConfig {
                draws: 20_000,
                seed: study_seed(77, &s.id, 1),
                ..Default::default()
            };
            let (d, _) = sample_posterior(s, Family::Bernoulli, &theta, &cfg).unwrap();
            d.column(0).iter().copied().collect::<Vec<f64>>()
        };
        let (x, y) = (run(&a), run(&b));
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let my = y.iter().sum::<f64>() / y.len() as f64;
        let cov: f64 = x.iter().zip(&y).map(|(u, v)| (u - mx) * (v - my)).sum();
        let vx: f64 = x.iter().map(|u| (u - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
        assert!((cov / (vx * vy).sqrt()).abs() < 0.05);
        assert_ne!(study_seed(77, "alpha", 1), study_seed(77, "alpha", 2));
    }
}
