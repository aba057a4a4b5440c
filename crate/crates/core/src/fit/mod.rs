//! Monte Carlo ECM for the penalized mixed model: an E-step of per-study
//! posterior draws followed by conditional minimizations over `β`, `γ` and
//! `τ`, repeated until the parameters settle.

pub mod estep;
pub mod mstep;
pub mod objective;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::glm::{fit_glm, predict_mean};
use crate::model::{augment_design, CovStructure, Family, MultiStudyDataset, SelectedSets, Theta};
use crate::penalty::{PenaltyKind, PenaltySpec};
use crate::sampler::{SamplerConfig, SamplerDiagnostics};

pub use estep::{estep, estep_with, EStepOutput};
pub use mstep::{
    kkt_violation_beta, kkt_violation_gamma, mstep_beta, mstep_gamma, mstep_tau, GammaStep, MStepOptions,
    MStepOutcome,
};
pub use objective::{
    beta_penalty, gamma_penalty, model_dimension, penalized_objective, q1_gradient, q1_value, q2_value,
};

/// Posterior sample size per EM iteration: `min(max, initial · ⌈growth^s⌉)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawSchedule {
    pub initial: usize,
    pub growth: f64,
    pub max: usize,
}

impl Default for DrawSchedule {
    fn default() -> Self {
        DrawSchedule {
            initial: 100,
            growth: 1.2,
            max: 2000,
        }
    }
}

impl DrawSchedule {
    pub fn at(&self, iteration: usize) -> usize {
        let factor = self.growth.powi(iteration.min(i32::MAX as usize) as i32).ceil();
        let l = (self.initial as f64 * factor).min(self.max as f64);
        (l as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub penalty1: PenaltyKind,
    pub penalty2: PenaltyKind,
    /// Concavity of both penalties (ignored by L1).
    pub omega: f64,
    pub max_iter: usize,
    /// Convergence threshold on the largest parameter change.
    pub tol: f64,
    /// Consecutive iterations below `tol` required to stop.
    pub window: usize,
    /// Burn-in, thinning, proposal scale and base seed. The draw count is
    /// taken from `schedule`.
    pub sampler: SamplerConfig,
    pub schedule: DrawSchedule,
    /// `None` picks diagonal when `q > 10`, full otherwise.
    pub structure: Option<CovStructure>,
    pub unpenalized_beta: Vec<usize>,
    pub unpenalized_groups: Vec<usize>,
    /// Starting value of every diagonal entry of `Γ`.
    pub gamma_init: f64,
    /// After each M-step, rescale `Γ` by the Cholesky factor of the draws'
    /// second moment (parameter expansion) for the first this-many
    /// iterations, or throughout when `lambda2 = 0`. Speeds up the otherwise
    /// slow convergence of the variance components; with a group penalty the
    /// expanded update moves the fixed point, hence the cutoff.
    pub rescale_iterations: usize,
    /// Run one more E-step at the final estimate so the returned draws come
    /// from the posterior under `θ̂`.
    pub final_estep: bool,
    /// Abort when `Q1` rises beyond Monte Carlo noise this many times in a row.
    pub divergence_window: usize,
    pub mstep: MStepOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            penalty1: PenaltyKind::Mcp,
            penalty2: PenaltyKind::Mcp,
            omega: 3.0,
            max_iter: 100,
            tol: 1e-3,
            window: 3,
            sampler: SamplerConfig::default(),
            schedule: DrawSchedule::default(),
            structure: None,
            unpenalized_beta: vec![0],
            unpenalized_groups: Vec::new(),
            gamma_init: 0.1,
            rescale_iterations: 10,
            final_estep: true,
            divergence_window: 5,
            mstep: MStepOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self, p: usize, q: usize) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(contract(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 || self.window == 0 {
            return Err(contract("max_iter and window must be at least 1"));
        }
        if self.schedule.initial == 0 || self.schedule.max == 0 || !(self.schedule.growth >= 1.0) {
            return Err(contract("draw schedule must have positive sizes and growth >= 1"));
        }
        if !(self.gamma_init >= 0.0) {
            return Err(contract("gamma_init must be nonnegative"));
        }
        if let Some(&j) = self.unpenalized_beta.iter().find(|&&j| j >= p) {
            return Err(contract(format!("unpenalized predictor {j} outside {p}")));
        }
        if let Some(&t) = self.unpenalized_groups.iter().find(|&&t| t >= q) {
            return Err(contract(format!("unpenalized group {t} outside {q}")));
        }
        self.beta_penalty()?;
        self.gamma_penalty()?;
        self.sampler.validate()
    }

    pub fn beta_penalty(&self) -> Result<PenaltySpec> {
        PenaltySpec::new(self.penalty1, self.lambda1, self.omega_for(self.penalty1))
    }

    pub fn gamma_penalty(&self) -> Result<PenaltySpec> {
        PenaltySpec::new(self.penalty2, self.lambda2, self.omega_for(self.penalty2))
    }

    fn omega_for(&self, kind: PenaltyKind) -> f64 {
        match kind {
            PenaltyKind::L1 => f64::INFINITY,
            _ => self.omega,
        }
    }

    pub fn structure_for(&self, q: usize) -> CovStructure {
        self.structure.unwrap_or_else(|| CovStructure::default_for(q))
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Theta,
    pub selected: SelectedSets,
    pub family: Family,
    pub lambda1: f64,
    pub lambda2: f64,
    pub q1_trace: Vec<f64>,
    pub q2_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sampler diagnostics of the last E-step.
    pub diagnostics: Vec<SamplerDiagnostics>,
    /// Draws of the last E-step, one `L × q` matrix per study.
    pub draws: Vec<DMatrix<f64>>,
    pub chain_states: Vec<Vec<f64>>,
    pub n_total: usize,
}

impl FitResult {
    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<Vec<f64>> {
        predict(&self.theta, self.family, x_new)
    }
}

/// Mean response from the fixed effects alone (random effects at zero).
pub fn predict(theta: &Theta, family: Family, x_new: &DMatrix<f64>) -> Result<Vec<f64>> {
    predict_mean(x_new, &theta.beta, family)
}

pub fn fit(dataset: &MultiStudyDataset, config: &FitConfig) -> Result<FitResult> {
    fit_from(dataset, config, None)
}

/// Starting point: penalized GLM on the merged rows for `β` (and `τ`),
/// `gamma_init` on the diagonal of `Γ`.
pub fn initial_theta(dataset: &MultiStudyDataset, config: &FitConfig) -> Result<Theta> {
    let (p, q) = (dataset.p(), dataset.q());
    let structure = config.structure_for(q);
    let (x, y) = dataset.merged();
    let glm = fit_glm(
        &x,
        &y,
        dataset.family,
        &config.beta_penalty()?,
        &config.unpenalized_beta,
        None,
        &config.mstep,
    )?;
    let mut theta = Theta::initial(p, q, structure, config.gamma_init);
    theta.beta = glm.beta;
    theta.tau = glm.tau;
    Ok(theta)
}

/// Second moment `(1/(KL)) Σ_k Σ_l α_kl α_klᵀ` of the draws.
fn draw_second_moment(draws: &[DMatrix<f64>], q: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(q, q);
    let mut count = 0usize;
    for d in draws {
        s += d.tr_mul(d);
        count += d.nrows();
    }
    s / count.max(1) as f64
}

/// Parameter-expansion step: with `Var(α) = S` estimated from the draws,
/// `Γ ← Γ chol(S)` and the chain states become `chol(S)⁻¹ α`, which leaves the
/// implied covariance of the random contribution consistent with `α ~ N(0, I)`.
fn rescale_random_effects(theta: &mut Theta, states: &mut [Vec<f64>], s: &DMatrix<f64>) {
    let q = theta.q();
    match theta.structure {
        CovStructure::Full => {
            let Some(chol) = s.clone().cholesky() else {
                debug!("draw second moment is not positive definite; skipping rescale");
                return;
            };
            let c = chol.l();
            let g = theta.gamma_matrix() * &c;
            for t in 0..q {
                for j in 0..=t {
                    theta.gamma[t][j] = g[(t, j)];
                }
            }
            for st in states.iter_mut() {
                if let Some(sol) = c.solve_lower_triangular(&DVector::from_column_slice(st)) {
                    st.copy_from_slice(sol.as_slice());
                }
            }
        }
        CovStructure::Diagonal => {
            for t in 0..q {
                let d = s[(t, t)].sqrt();
                if d > 0.0 && d.is_finite() {
                    theta.gamma[t][0] *= d;
                    for st in states.iter_mut() {
                        st[t] /= d;
                    }
                }
            }
        }
    }
}

/// MCECM from `warm` (a previous fit on the same data) or from
/// [`initial_theta`].
pub fn fit_from(dataset: &MultiStudyDataset, config: &FitConfig, warm: Option<&FitResult>) -> Result<FitResult> {
    let (p, q) = (dataset.p(), dataset.q());
    config.validate(p, q)?;
    let structure = config.structure_for(q);
    let spec1 = config.beta_penalty()?;
    let spec2 = config.gamma_penalty()?;

    let (mut theta, mut states) = match warm {
        Some(w) if w.theta.p() == p && w.theta.q() == q && w.theta.structure == structure => {
            (w.theta.clone(), Some(w.chain_states.clone()))
        }
        Some(_) => return Err(contract("warm start does not match the dataset or structure")),
        None => (initial_theta(dataset, config)?, None),
    };

    let mut q1_trace = Vec::new();
    let mut q2_trace = Vec::new();
    let mut last_se = 0.0;
    let mut rising = 0usize;
    let mut quiet = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut last: Option<EStepOutput> = None;

    for s in 0..config.max_iter {
        iterations = s + 1;
        let scfg = SamplerConfig {
            draws: config.schedule.at(s),
            ..config.sampler
        };
        let e = estep_with(dataset, &theta, &scfg, s as u64, states.as_deref())?;

        if let Some(&prev) = q1_trace.last() {
            let noise = 3.0 * (e.q1_se * e.q1_se + last_se * last_se).sqrt();
            if e.q1 > prev + noise {
                rising += 1;
            } else {
                rising = 0;
            }
            if rising >= config.divergence_window {
                return Err(Error::Divergence {
                    iterations,
                    reason: format!(
                        "Q1 rose beyond Monte Carlo noise in {rising} consecutive iterations (now {:.4})",
                        e.q1
                    ),
                });
            }
        }
        q1_trace.push(e.q1);
        q2_trace.push(e.q2);
        last_se = e.q1_se;

        let prev = theta.clone();
        let aug = augment_design(dataset, &e.draws, structure)?;
        let b = mstep::mstep_beta(&aug, &theta, &spec1, &config.unpenalized_beta, &config.mstep)?;
        theta.beta = b.value;
        let g = mstep::solve_gamma(&aug, &theta, &spec2, &config.unpenalized_groups, &config.mstep);
        theta.set_flat_gamma(&g.value);
        theta.tau = mstep::mstep_tau(&aug, &theta)?;
        if !b.converged || !g.converged {
            debug!("iteration {iterations}: M-step hit its iteration cap");
        }

        let mut new_states = e.last_states.clone();
        let flipped = theta.reflect_signs();
        for st in new_states.iter_mut() {
            for &c in &flipped {
                st[c] = -st[c];
            }
        }
        if (s < config.rescale_iterations || config.lambda2 == 0.0) && theta.gamma.iter().flatten().any(|v| *v != 0.0) {
            let mut m = draw_second_moment(&e.draws, q);
            for &c in &flipped {
                for j in 0..q {
                    if j != c {
                        m[(c, j)] = -m[(c, j)];
                        m[(j, c)] = -m[(j, c)];
                    }
                }
            }
            rescale_random_effects(&mut theta, &mut new_states, &m);
        }
        states = Some(new_states);
        last = Some(e);

        let change = theta.max_abs_diff(&prev);
        if change < config.tol {
            quiet += 1;
        } else {
            quiet = 0;
        }
        if quiet >= config.window {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "MCECM reached {} iterations without meeting tolerance {}",
            config.max_iter, config.tol
        );
    }

    let e = if config.final_estep {
        let scfg = SamplerConfig {
            draws: config.schedule.at(iterations),
            ..config.sampler
        };
        estep_with(dataset, &theta, &scfg, iterations as u64, states.as_deref())?
    } else {
        last.expect("at least one iteration ran")
    };

    Ok(FitResult {
        selected: theta.selected(),
        theta,
        family: dataset.family,
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        q1_trace,
        q2_trace,
        converged,
        iterations,
        diagnostics: e.diagnostics,
        chain_states: e.last_states,
        draws: e.draws,
        n_total: dataset.n_total(),
    })
}
