//! Multi-study simulation: scenario generators, the three analysis strategies
//! (per-study, merged GLM, mixed model), replicate tables and the
//! hold-one-study-out protocol.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::fit::{fit, FitConfig, MStepOptions};
use crate::glm::{bic_path, fit_glm, predict_mean, BicSettings};
use crate::model::{sigmoid, Family, MultiStudyDataset, StudyData};
use crate::penalty::PenaltySpec;
use crate::sampler::splitmix64;
use crate::tuning::{tune, GridSettings, SearchOptions};

/// Whether the relevant predictors are known (estimation only) or must be
/// selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Oracle,
    NonOracle,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "oracle" => Ok(Mode::Oracle),
            "non-oracle" | "nonoracle" => Ok(Mode::NonOracle),
            other => Err(Error::Unsupported(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Oracle => "oracle",
            Mode::NonOracle => "non-oracle",
        })
    }
}

/// One simulation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Total training sample size `N`.
    pub n: usize,
    /// Number of studies `K`.
    pub k: usize,
    /// Between-study variance of every random effect.
    pub sigma2: f64,
    /// True fixed effects `(β0, β1, …)`; padded with zeros up to `p + 1`.
    pub beta: Vec<f64>,
    /// Number of predictors besides the intercept.
    pub p: usize,
    pub validation_size: usize,
    pub replications: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Use the training studies' random effects for the validation set
    /// instead of fresh draws.
    pub reuse_training_alpha: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n: 500,
            k: 5,
            sigma2: 1.0,
            beta: vec![0.0, 1.0, 1.0],
            p: 2,
            validation_size: 100,
            replications: 1,
            seed: 1,
            mode: Mode::Oracle,
            reuse_training_alpha: false,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n < self.k {
            return Err(contract(format!("need N >= K >= 1, got N={}, K={}", self.n, self.k)));
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(contract(format!("sigma2 must be nonnegative, got {}", self.sigma2)));
        }
        if self.beta.is_empty() || self.p + 1 < self.beta.len() {
            return Err(contract(format!(
                "{} true coefficients do not fit p = {} predictors plus intercept",
                self.beta.len(),
                self.p
            )));
        }
        if self.validation_size < self.k {
            return Err(contract("validation set must have at least one subject per study"));
        }
        if self.replications == 0 {
            return Err(contract("replications must be at least 1"));
        }
        Ok(())
    }

    /// True coefficients on all `p + 1` columns.
    pub fn full_beta(&self) -> Vec<f64> {
        let mut b = self.beta.clone();
        b.resize(self.p + 1, 0.0);
        b
    }

    /// Columns the oracle strategies use: the intercept and every predictor
    /// with a nonzero true effect. Non-oracle strategies use all columns.
    pub fn model_columns(&self) -> Vec<usize> {
        match self.mode {
            Mode::NonOracle => (0..=self.p).collect(),
            Mode::Oracle => {
                let b = self.full_beta();
                (0..=self.p).filter(|&j| j == 0 || b[j] != 0.0).collect()
            }
        }
    }
}

/// Study 1 gets `round(N/3)`, the rest is spread evenly with the earliest
/// studies taking any extra unit.
pub fn study_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || n < k {
        return Err(contract(format!("need N >= K >= 1, got N={n}, K={k}")));
    }
    if k == 1 {
        return Ok(vec![n]);
    }
    let first = ((n as f64 / 3.0).round() as usize).clamp(1, n - (k - 1));
    let rest = n - first;
    let (base, extra) = (rest / (k - 1), rest % (k - 1));
    let mut sizes = vec![first];
    sizes.extend((0..k - 1).map(|i| base + usize::from(i < extra)));
    Ok(sizes)
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(replicate as u64 ^ 0x5eed)))
}

/// Random effects on the intercept and the truly active columns; inactive
/// predictors have zero effect in every study.
fn draw_alpha(rng: &mut ChaCha8Rng, beta: &[f64], sd: f64) -> Vec<f64> {
    beta.iter()
        .enumerate()
        .map(|(j, b)| {
            if j == 0 || *b != 0.0 {
                sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        })
        .collect()
}

fn draw_study(
    rng: &mut ChaCha8Rng,
    id: String,
    n: usize,
    beta: &[f64],
    alpha: &[f64],
) -> Result<StudyData> {
    let d = beta.len();
    let x = DMatrix::from_fn(n, d, |_, j| if j == 0 { 1.0 } else { f64::NAN });
    let mut x = x;
    let mut y = DVector::zeros(n);
    for i in 0..n {
        for j in 1..d {
            x[(i, j)] = rng.sample(StandardNormal);
        }
        let eta: f64 = (0..d).map(|j| x[(i, j)] * (beta[j] + alpha[j])).sum();
        let u: f64 = rng.random();
        y[i] = if u < sigmoid(eta) { 1.0 } else { 0.0 };
    }
    StudyData::new(id, y, x, (0..d).collect())
}

/// Training studies and a validation set for one replicate.
///
/// Predictors are independent standard normals, `z = x` (intercept
/// included), `α_kj ~ N(0, σ²)` on the intercept and active columns, and
/// `y ~ Bernoulli(logit⁻¹(x'β* + x'α_k))`.
/// The validation subjects are allocated to `K` fresh populations with the
/// same rule as the training data.
pub fn gen_scenario(scenario: &Scenario, replicate: usize) -> Result<(MultiStudyDataset, StudyData)> {
    let r = generate(scenario, replicate)?;
    Ok((r.train, r.validation))
}

/// One generated replicate together with the true study effects.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub train: MultiStudyDataset,
    pub validation: StudyData,
    /// `α_k` of each training study, on all `p + 1` columns.
    pub alpha: Vec<Vec<f64>>,
}

/// As [`gen_scenario`], also returning the study effects.
pub fn generate(scenario: &Scenario, replicate: usize) -> Result<Replicate> {
    scenario.validate()?;
    let beta = scenario.full_beta();
    let d = beta.len();
    let sd = scenario.sigma2.sqrt();
    let mut rng = replicate_rng(scenario.seed, replicate);

    let mut alphas = Vec::with_capacity(scenario.k);
    let mut studies = Vec::with_capacity(scenario.k);
    for (k, &n) in study_sizes(scenario.n, scenario.k)?.iter().enumerate() {
        let alpha = draw_alpha(&mut rng, &beta, sd);
        studies.push(draw_study(&mut rng, format!("study{}", k + 1), n, &beta, &alpha)?);
        alphas.push(alpha);
    }
    let names = std::iter::once("intercept".to_string())
        .chain((1..d).map(|j| format!("x{j}")))
        .collect();
    let train = MultiStudyDataset::new(studies, names, Family::Bernoulli)?;

    let mut vx = Vec::new();
    let mut vy = Vec::new();
    for (k, &n) in study_sizes(scenario.validation_size, scenario.k)?.iter().enumerate() {
        let alpha = if scenario.reuse_training_alpha {
            alphas[k].clone()
        } else {
            draw_alpha(&mut rng, &beta, sd)
        };
        let s = draw_study(&mut rng, String::new(), n, &beta, &alpha)?;
        vx.push(s.x);
        vy.extend(s.y.iter().copied());
    }
    let rows: usize = vx.iter().map(|m| m.nrows()).sum();
    let mut x = DMatrix::zeros(rows, d);
    let mut r = 0;
    for m in &vx {
        x.rows_mut(r, m.nrows()).copy_from(m);
        r += m.nrows();
    }
    let validation = StudyData::new("validation", DVector::from_vec(vy), x, (0..d).collect())?;
    Ok(Replicate {
        train,
        validation,
        alpha: alphas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Separate fit per study; metrics averaged across studies.
    Ind,
    /// One fixed-effects fit on the merged rows.
    Glm,
    /// Mixed-model fit on the merged studies; fixed effects for prediction.
    Glmm,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ind" => Ok(Strategy::Ind),
            "glm" => Ok(Strategy::Glm),
            "glmm" => Ok(Strategy::Glmm),
            other => Err(Error::Unsupported(format!("unknown strategy '{other}'"))),
        }
    }
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Glmm, Strategy::Glm, Strategy::Ind];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Ind => "IND",
            Strategy::Glm => "GLM",
            Strategy::Glmm => "GLMM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: Strategy,
    /// Coefficient estimates on all columns (averaged over studies for IND).
    pub beta: Vec<f64>,
    pub pe_med: f64,
    /// `None` in oracle mode.
    pub tp: Option<f64>,
    pub fp: Option<f64>,
    /// Studies dropped from the IND averages (separation or non-convergence).
    pub excluded: usize,
}

/// Fitting choices shared by the strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySettings {
    pub mode: Mode,
    /// Mixed-model configuration; `lambda1`/`lambda2` are ignored (zero in
    /// oracle mode, tuned by ICQ otherwise).
    pub fit: FitConfig,
    pub grid: GridSettings,
    pub search: SearchOptions,
    pub bic: BicSettings,
    pub glm: MStepOptions,
    /// Per-study fits with any `|β̂_j|` above this are treated as separated.
    pub separation_bound: f64,
}

impl Default for StrategySettings {
    fn default() -> Self {
        StrategySettings {
            mode: Mode::Oracle,
            fit: FitConfig::default(),
            grid: GridSettings::default(),
            search: SearchOptions::default(),
            bic: BicSettings::default(),
            glm: MStepOptions::default(),
            separation_bound: 15.0,
        }
    }
}

/// `median |y − p̂|`.
pub fn pe_med(y: &[f64], p: &[f64]) -> f64 {
    let mut e: Vec<f64> = y.iter().zip(p).map(|(a, b)| (a - b).abs()).collect();
    median(&mut e)
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// True and false positives among the non-intercept columns.
pub fn selection_counts(beta_hat: &[f64], truth: &[f64]) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for j in 1..beta_hat.len().min(truth.len()) {
        if beta_hat[j] != 0.0 {
            if truth[j] != 0.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

fn expand(beta: &[f64], columns: &[usize], width: usize) -> Vec<f64> {
    let mut full = vec![0.0; width];
    for (b, &c) in beta.iter().zip(columns) {
        full[c] = *b;
    }
    full
}

fn glm_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    mode: Mode,
    settings: &StrategySettings,
) -> Result<crate::glm::GlmFit> {
    match mode {
        Mode::Oracle => fit_glm(x, y, Family::Bernoulli, &PenaltySpec::mcp(0.0), &[0], None, &settings.glm),
        Mode::NonOracle => Ok(bic_path(x, y, Family::Bernoulli, &settings.bic, &[0], &settings.glm)?
            .best_fit()
            .clone()),
    }
}

/// Fit one strategy on `train` and score it on `validation`.
///
/// `truth` holds the true coefficients on all columns; `columns` are the
/// columns the model may use (the oracle subset or all).
pub fn run_strategy(
    strategy: Strategy,
    train: &MultiStudyDataset,
    validation: &StudyData,
    truth: &[f64],
    columns: &[usize],
    settings: &StrategySettings,
) -> Result<StrategyMetrics> {
    if validation.p() != train.p() {
        return Err(contract("validation and training columns differ"));
    }
    let width = train.p();
    let data = train.select_columns(columns)?;
    let xv = validation.x.select_columns(columns.iter());
    let yv: Vec<f64> = validation.y.iter().copied().collect();
    let oracle = settings.mode == Mode::Oracle;
    let counts = |b: &[f64]| {
        let (tp, fp) = selection_counts(b, truth);
        (tp as f64, fp as f64)
    };

    match strategy {
        Strategy::Glm => {
            let (x, y) = data.merged();
            let f = glm_fit(&x, &y, settings.mode, settings)?;
            let beta = expand(&f.beta, columns, width);
            let pe = pe_med(&yv, &predict_mean(&xv, &f.beta, Family::Bernoulli)?);
            let (tp, fp) = counts(&beta);
            Ok(StrategyMetrics {
                strategy,
                beta,
                pe_med: pe,
                tp: (!oracle).then_some(tp),
                fp: (!oracle).then_some(fp),
                excluded: 0,
            })
        }
        Strategy::Ind => {
            let mut betas = Vec::new();
            let mut pes = Vec::new();
            let mut excluded = 0;
            for s in &data.studies {
                let f = glm_fit(&s.x, &s.y, settings.mode, settings);
                match f {
                    Ok(f) if f.converged && f.beta.iter().all(|b| b.abs() <= settings.separation_bound) => {
                        pes.push(pe_med(&yv, &predict_mean(&xv, &f.beta, Family::Bernoulli)?));
                        betas.push(expand(&f.beta, columns, width));
                    }
                    Ok(_) => {
                        warn!("study '{}' looks separated; excluded from IND averages", s.id);
                        excluded += 1;
                    }
                    Err(e) => {
                        warn!("study '{}' failed ({e}); excluded from IND averages", s.id);
                        excluded += 1;
                    }
                }
            }
            if betas.is_empty() {
                return Err(Error::AllFitsFailed(vec!["every per-study fit was excluded".into()]));
            }
            let m = betas.len() as f64;
            let beta: Vec<f64> = (0..width).map(|j| betas.iter().map(|b| b[j]).sum::<f64>() / m).collect();
            let (tp, fp) = betas
                .iter()
                .map(|b| counts(b))
                .fold((0.0, 0.0), |a, c| (a.0 + c.0 / m, a.1 + c.1 / m));
            Ok(StrategyMetrics {
                strategy,
                beta,
                pe_med: pes.iter().sum::<f64>() / m,
                tp: (!oracle).then_some(tp),
                fp: (!oracle).then_some(fp),
                excluded,
            })
        }
        Strategy::Glmm => {
            let result = match settings.mode {
                Mode::Oracle => {
                    let cfg = FitConfig {
                        lambda1: 0.0,
                        lambda2: 0.0,
                        ..settings.fit.clone()
                    };
                    fit(&data, &cfg)?
                }
                Mode::NonOracle => tune(&data, &settings.fit, &settings.grid, &settings.search)?.best,
            };
            let beta = expand(&result.theta.beta, columns, width);
            let pe = pe_med(&yv, &result.predict(&xv)?);
            let (tp, fp) = counts(&beta);
            Ok(StrategyMetrics {
                strategy,
                beta,
                pe_med: pe,
                tp: (!oracle).then_some(tp),
                fp: (!oracle).then_some(fp),
                excluded: 0,
            })
        }
    }
}

/// Per-strategy averages over the replicates of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub beta: Vec<f64>,
    pub pe_med: f64,
    pub tp: Option<f64>,
    pub fp: Option<f64>,
    /// Replicates that produced metrics.
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub scenario: Scenario,
    pub summaries: Vec<StrategySummary>,
    /// Raw per-replicate metrics, in replicate order.
    pub runs: Vec<Vec<StrategyMetrics>>,
    /// `"replicate r, STRATEGY: message"` for every failed cell.
    pub failures: Vec<String>,
}

impl ReplicateRow {
    pub fn summary(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateTable {
    pub rows: Vec<ReplicateRow>,
}

fn summarize(strategy: Strategy, metrics: &[&StrategyMetrics], width: usize) -> StrategySummary {
    let m = metrics.len() as f64;
    let mean = |f: &dyn Fn(&StrategyMetrics) -> f64| metrics.iter().map(|x| f(x)).sum::<f64>() / m;
    let opt_mean = |f: &dyn Fn(&StrategyMetrics) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = metrics.iter().map(|x| f(x)).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    StrategySummary {
        strategy,
        beta: (0..width).map(|j| mean(&|x| x.beta[j])).collect(),
        pe_med: mean(&|x| x.pe_med),
        tp: opt_mean(&|x| x.tp),
        fp: opt_mean(&|x| x.fp),
        runs: metrics.len(),
    }
}

/// Sampler seed of the mixed-model fit in replicate `r` of a table run.
pub fn fit_seed(base: u64, replicate: usize) -> u64 {
    splitmix64(base ^ (replicate as u64).wrapping_mul(0x9e37))
}

/// Runs every strategy on `R` replicates of each scenario. Failures are
/// recorded per cell; replicates run in parallel with per-replicate seeds.
pub fn replicate_table(
    scenarios: &[Scenario],
    strategies: &[Strategy],
    settings: &StrategySettings,
) -> Result<ReplicateTable> {
    let mut rows = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        sc.validate()?;
        let truth = sc.full_beta();
        let columns = sc.model_columns();
        let settings = StrategySettings {
            mode: sc.mode,
            ..settings.clone()
        };
        let per_rep: Vec<(Vec<StrategyMetrics>, Vec<String>)> = (0..sc.replications)
            .into_par_iter()
            .map(|r| {
                let mut metrics = Vec::new();
                let mut failures = Vec::new();
                match gen_scenario(sc, r) {
                    Ok((train, validation)) => {
                        for &st in strategies {
                            let mut cell = settings.clone();
                            cell.fit.sampler.seed = fit_seed(sc.seed, r);
                            match run_strategy(st, &train, &validation, &truth, &columns, &cell) {
                                Ok(m) => metrics.push(m),
                                Err(e) => failures.push(format!("replicate {r}, {}: {e}", st.label())),
                            }
                        }
                    }
                    Err(e) => failures.push(format!("replicate {r}: generation failed: {e}")),
                }
                (metrics, failures)
            })
            .collect();
        let width = sc.p + 1;
        let summaries = strategies
            .iter()
            .map(|&st| {
                let ms: Vec<&StrategyMetrics> = per_rep
                    .iter()
                    .flat_map(|(m, _)| m.iter().filter(|x| x.strategy == st))
                    .collect();
                summarize(st, &ms, width)
            })
            .collect();
        let failures = per_rep.iter().flat_map(|(_, f)| f.iter().cloned()).collect();
        rows.push(ReplicateRow {
            scenario: sc.clone(),
            summaries,
            runs: per_rep.into_iter().map(|(m, _)| m).collect(),
            failures,
        });
    }
    Ok(ReplicateTable { rows })
}

impl ReplicateTable {
    /// CSV with the simulation-table layout: oracle rows report coefficient
    /// means and prediction errors; non-oracle rows add `p` and the
    /// selection counts. Mixed modes are written with the non-oracle layout.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let non_oracle = self.rows.iter().any(|r| r.scenario.mode == Mode::NonOracle);
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = vec!["N"];
        if non_oracle {
            header.push("p");
        }
        header.extend(["K", "sigma2", "beta1_GLMM", "beta2_GLMM", "beta1_GLM", "beta2_GLM"]);
        if non_oracle {
            header.extend(["TP_GLMM", "FP_GLMM", "TP_GLM", "FP_GLM", "TP_IND", "FP_IND"]);
        }
        header.extend(["PE_med_GLMM", "PE_med_GLM", "PE_med_IND", "failures"]);
        out.write_record(&header)?;

        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
        for row in &self.rows {
            let sc = &row.scenario;
            let s = |st| row.summary(st).filter(|s| s.runs > 0);
            let coef = |st, j: usize| fmt(s(st).and_then(|x: &StrategySummary| x.beta.get(j).copied()));
            let mut rec = vec![sc.n.to_string()];
            if non_oracle {
                rec.push(sc.p.to_string());
            }
            rec.extend([sc.k.to_string(), sc.sigma2.to_string()]);
            rec.extend([
                coef(Strategy::Glmm, 1),
                coef(Strategy::Glmm, 2),
                coef(Strategy::Glm, 1),
                coef(Strategy::Glm, 2),
            ]);
            if non_oracle {
                for st in [Strategy::Glmm, Strategy::Glm, Strategy::Ind] {
                    rec.push(fmt(s(st).and_then(|x| x.tp)));
                    rec.push(fmt(s(st).and_then(|x| x.fp)));
                }
            }
            for st in [Strategy::Glmm, Strategy::Glm, Strategy::Ind] {
                rec.push(fmt(s(st).map(|x| x.pe_med)));
            }
            rec.push(row.failures.len().to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// How the mixed model is tuned inside the holdout protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSettings {
    pub fit: FitConfig,
    /// `Some` tunes `(λ1, λ2)` by ICQ; `None` uses `fit.lambda1/lambda2`.
    pub grid: Option<GridSettings>,
    pub search: SearchOptions,
    pub bic: BicSettings,
    pub glm: MStepOptions,
}

impl Default for HoldoutSettings {
    fn default() -> Self {
        HoldoutSettings {
            fit: FitConfig::default(),
            grid: Some(GridSettings::default()),
            search: SearchOptions::default(),
            bic: BicSettings::default(),
            glm: MStepOptions::default(),
        }
    }
}

/// Absolute prediction errors `|y − p̂|` on one held-out study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutResult {
    pub study: String,
    pub pglmm: Vec<f64>,
    pub pglm_merged: Vec<f64>,
    /// Average of the per-study fits' predicted probabilities.
    pub pglm_per_study: Vec<f64>,
}

impl HoldoutResult {
    pub fn medians(&self) -> (f64, f64, f64) {
        (
            median(&mut self.pglmm.clone()),
            median(&mut self.pglm_merged.clone()),
            median(&mut self.pglm_per_study.clone()),
        )
    }
}

fn abs_errors(y: &DVector<f64>, p: &[f64]) -> Vec<f64> {
    y.iter().zip(p).map(|(a, b)| (a - b).abs()).collect()
}

/// Train on all studies but one, predict the held-out one; repeated for every
/// study.
pub fn holdout_eval(dataset: &MultiStudyDataset, settings: &HoldoutSettings) -> Result<Vec<HoldoutResult>> {
    if dataset.k() < 2 {
        return Err(contract("hold-one-study-out needs at least two studies"));
    }
    if dataset.family != Family::Bernoulli {
        return Err(Error::Unsupported("holdout evaluation is defined for binary responses".into()));
    }
    (0..dataset.k())
        .map(|h| {
            let test = &dataset.studies[h];
            let train = dataset.without_study(h)?;

            let mixed = match &settings.grid {
                Some(g) => tune(&train, &settings.fit, g, &settings.search)?.best,
                None => fit(&train, &settings.fit)?,
            };
            let pglmm = abs_errors(&test.y, &mixed.predict(&test.x)?);

            let (x, y) = train.merged();
            let merged = bic_path(&x, &y, Family::Bernoulli, &settings.bic, &[0], &settings.glm)?;
            let pglm_merged = abs_errors(&test.y, &predict_mean(&test.x, &merged.best_fit().beta, Family::Bernoulli)?);

            let mut avg = vec![0.0; test.n()];
            for s in &train.studies {
                let path = bic_path(&s.x, &s.y, Family::Bernoulli, &settings.bic, &[0], &settings.glm)?;
                let p = predict_mean(&test.x, &path.best_fit().beta, Family::Bernoulli)?;
                for (a, v) in avg.iter_mut().zip(p) {
                    *a += v / train.k() as f64;
                }
            }
            Ok(HoldoutResult {
                study: test.id.clone(),
                pglmm,
                pglm_merged,
                pglm_per_study: abs_errors(&test.y, &avg),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_rule() {
        assert_eq!(study_sizes(90, 4).unwrap(), vec![30, 20, 20, 20]);
        assert_eq!(study_sizes(500, 5).unwrap(), vec![167, 84, 83, 83, 83]);
        assert_eq!(study_sizes(7, 1).unwrap(), vec![7]);
        assert_eq!(study_sizes(2, 2).unwrap(), vec![1, 1]);
        assert!(study_sizes(1, 2).is_err());
    }

    #[test]
    fn pe_med_extremes() {
        assert_eq!(pe_med(&[1.0, 0.0, 1.0], &[0.5, 0.5, 0.5]), 0.5);
        assert_eq!(pe_med(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(pe_med(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn selection_counts_skip_intercept() {
        assert_eq!(selection_counts(&[0.3, 1.0, 0.0, 0.2], &[0.0, 1.0, 1.0, 0.0]), (1, 1));
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let sc = Scenario {
            n: 90,
            k: 4,
            ..Default::default()
        };
        let (a, va) = gen_scenario(&sc, 3).unwrap();
        let (b, vb) = gen_scenario(&sc, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(va, vb);
        let sizes: Vec<usize> = a.studies.iter().map(|s| s.n()).collect();
        assert_eq!(sizes, vec![30, 20, 20, 20]);
        assert_eq!(va.n(), 100);
        assert_eq!(a.q(), 3);
        let (c, _) = gen_scenario(&sc, 4).unwrap();
        assert_ne!(a, c);
    }
}
