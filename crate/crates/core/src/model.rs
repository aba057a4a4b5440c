//! Exponential-family likelihoods, study containers and the Γ ↔ γ
//! reparameterization shared by the sampler and the M-steps.
//!
//! The linear predictor for subject `i` of study `k` is
//! `x_ki'β + z_ki'Γα_k`, where `Γ` is lower triangular (or diagonal) and the
//! random effects `α_k` are standard normal. `Γ` is stored row-wise as the
//! groups `γ_t = (Γ_t1, …, Γ_tt)`, so that zeroing a whole group removes the
//! between-study variance of predictor `t`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Response distribution with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Binary response, logit link, dispersion fixed at 1.
    Bernoulli,
    /// Real response, identity link, free dispersion `τ` (the variance).
    Gaussian,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Bernoulli => "bernoulli",
            Family::Gaussian => "gaussian",
        }
    }

    /// Whether `τ` is estimated (gaussian) or pinned at 1 (bernoulli).
    pub fn has_free_dispersion(self) -> bool {
        matches!(self, Family::Gaussian)
    }

    pub fn validate_response(self, y: f64) -> Result<()> {
        let ok = match self {
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Gaussian => y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidResponse {
                family: self.name(),
                value: y,
            })
        }
    }

    /// Log density without response validation. The `c(y)` normalizer of the
    /// bernoulli family is 1; the gaussian keeps its `-½log(2πτ)` term.
    #[inline]
    pub fn log_density_unchecked(self, y: f64, eta: f64, tau: f64) -> f64 {
        match self {
            Family::Bernoulli => y * eta - softplus(eta),
            Family::Gaussian => {
                let r = y - eta;
                -r * r / (2.0 * tau) - 0.5 * (2.0 * std::f64::consts::PI * tau).ln()
            }
        }
    }

    /// Inverse link.
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Bernoulli => sigmoid(eta),
            Family::Gaussian => eta,
        }
    }

    /// Derivative of `-log f` with respect to the linear predictor.
    #[inline]
    pub(crate) fn neg_score(self, y: f64, eta: f64, tau: f64) -> f64 {
        match self {
            Family::Bernoulli => sigmoid(eta) - y,
            Family::Gaussian => (eta - y) / tau,
        }
    }

    /// `(−log f, ∂/∂η, ∂²/∂η²)` at one linear predictor.
    #[inline]
    pub(crate) fn loss_terms(self, y: f64, eta: f64, tau: f64) -> (f64, f64, f64) {
        match self {
            Family::Bernoulli => {
                let (s, sp) = if eta >= 0.0 {
                    let e = (-eta).exp();
                    (1.0 / (1.0 + e), eta + e.ln_1p())
                } else {
                    let e = eta.exp();
                    (e / (1.0 + e), e.ln_1p())
                };
                (sp - y * eta, s - y, s * (1.0 - s))
            }
            Family::Gaussian => {
                let r = eta - y;
                (
                    r * r / (2.0 * tau) + 0.5 * (2.0 * std::f64::consts::PI * tau).ln(),
                    r / tau,
                    1.0 / tau,
                )
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" | "binomial" | "logistic" => Ok(Family::Bernoulli),
            "gaussian" | "normal" => Ok(Family::Gaussian),
            other => Err(Error::Unsupported(format!("unknown family '{other}'"))),
        }
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log density of one observation given its linear predictor.
pub fn log_density(family: Family, y: f64, vartheta: f64, tau: f64) -> Result<f64> {
    family.validate_response(y)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(contract(format!("dispersion must be positive, got {tau}")));
    }
    Ok(family.log_density_unchecked(y, vartheta, tau))
}

/// Shape of the random-effect loading matrix `Γ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovStructure {
    /// Lower-triangular `Γ`; group `t` holds the `t` entries of row `t`.
    Full,
    /// Diagonal `Γ`; every group is a single nonnegative entry.
    Diagonal,
}

impl CovStructure {
    /// Diagonal once the random-effect dimension exceeds ten.
    pub fn default_for(q: usize) -> Self {
        if q > 10 {
            CovStructure::Diagonal
        } else {
            CovStructure::Full
        }
    }

    /// Length of the flattened `γ`.
    pub fn gamma_len(self, q: usize) -> usize {
        match self {
            CovStructure::Full => q * (q + 1) / 2,
            CovStructure::Diagonal => q,
        }
    }

    /// `(row, column)` of `Γ` for each flattened `γ` entry, in storage order.
    pub fn gamma_positions(self, q: usize) -> Vec<(usize, usize)> {
        match self {
            CovStructure::Full => (0..q)
                .flat_map(|r| (0..=r).map(move |c| (r, c)))
                .collect(),
            CovStructure::Diagonal => (0..q).map(|t| (t, t)).collect(),
        }
    }

    /// Half-open range of flattened indices belonging to group `t`.
    pub fn group_range(self, t: usize) -> std::ops::Range<usize> {
        match self {
            CovStructure::Full => {
                let start = t * (t + 1) / 2;
                start..start + t + 1
            }
            CovStructure::Diagonal => t..t + 1,
        }
    }
}

impl fmt::Display for CovStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovStructure::Full => "full",
            CovStructure::Diagonal => "diagonal",
        })
    }
}

impl FromStr for CovStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "full-lower-triangular" | "lower" => Ok(CovStructure::Full),
            "diagonal" | "diag" => Ok(CovStructure::Diagonal),
            other => Err(Error::Unsupported(format!("unknown structure '{other}'"))),
        }
    }
}

/// Responses and predictors of one study.
///
/// By convention column 0 of `x` is the all-ones intercept. `z_columns`
/// selects the predictors that also carry a random effect.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z_columns: Vec<usize>,
}

impl StudyData {
    /// Checks shapes and that every random-effect column exists in `x`.
    /// Empty studies are accepted here (the sampler treats them as
    /// prior-only); [`MultiStudyDataset`] rejects them.
    pub fn new(
        id: impl Into<String>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        z_columns: Vec<usize>,
    ) -> Result<Self> {
        let id = id.into();
        if y.len() != x.nrows() {
            return Err(contract(format!(
                "study '{id}': {} responses but {} predictor rows",
                y.len(),
                x.nrows()
            )));
        }
        if let Some(&bad) = z_columns.iter().find(|&&c| c >= x.ncols()) {
            return Err(contract(format!(
                "study '{id}': random-effect column {bad} outside {} predictors",
                x.ncols()
            )));
        }
        let mut seen = z_columns.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != z_columns.len() {
            return Err(contract(format!("study '{id}': duplicate random-effect column")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(contract(format!("study '{id}': non-finite predictor")));
        }
        Ok(StudyData {
            id,
            y,
            x,
            z_columns,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z_columns.len()
    }

    /// The `n × q` random-effect design.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.q(), |i, t| self.x[(i, self.z_columns[t])])
    }
}

/// K studies sharing predictor columns and random-effect columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStudyDataset {
    pub studies: Vec<StudyData>,
    pub column_names: Vec<String>,
    pub family: Family,
}

impl MultiStudyDataset {
    pub fn new(studies: Vec<StudyData>, column_names: Vec<String>, family: Family) -> Result<Self> {
        let first = studies
            .first()
            .ok_or_else(|| contract("a dataset needs at least one study"))?;
        let p = first.p();
        if column_names.len() != p {
            return Err(contract(format!(
                "{} column names for {p} predictors",
                column_names.len()
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for s in &studies {
            if s.n() == 0 {
                return Err(contract(format!("study '{}' has no observations", s.id)));
            }
            if s.p() != p {
                return Err(contract(format!(
                    "study '{}' has {} predictors, expected {p}",
                    s.id,
                    s.p()
                )));
            }
            if s.z_columns != first.z_columns {
                return Err(contract(format!(
                    "study '{}' uses different random-effect columns",
                    s.id
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(contract(format!("duplicate study id '{}'", s.id)));
            }
            for &y in s.y.iter() {
                family.validate_response(y)?;
            }
        }
        Ok(MultiStudyDataset {
            studies,
            column_names,
            family,
        })
    }

    pub fn k(&self) -> usize {
        self.studies.len()
    }

    pub fn p(&self) -> usize {
        self.studies[0].p()
    }

    pub fn q(&self) -> usize {
        self.studies[0].q()
    }

    pub fn z_columns(&self) -> &[usize] {
        &self.studies[0].z_columns
    }

    /// Total number of subjects `N = Σ n_k`.
    pub fn n_total(&self) -> usize {
        self.studies.iter().map(StudyData::n).sum()
    }

    /// Rows of all studies stacked in study order.
    pub fn merged(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_total();
        let p = self.p();
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        let mut row = 0;
        for s in &self.studies {
            x.rows_mut(row, s.n()).copy_from(&s.x);
            y.rows_mut(row, s.n()).copy_from(&s.y);
            row += s.n();
        }
        (x, y)
    }

    /// The same data with a different random-effect column set.
    pub fn with_z_columns(&self, z_columns: Vec<usize>) -> Result<Self> {
        let studies = self
            .studies
            .iter()
            .map(|s| StudyData::new(s.id.clone(), s.y.clone(), s.x.clone(), z_columns.clone()))
            .collect::<Result<Vec<_>>>()?;
        MultiStudyDataset::new(studies, self.column_names.clone(), self.family)
    }

    /// Keep only the listed predictor columns (random-effect columns are
    /// remapped; those not kept are dropped).
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        let p = self.p();
        if let Some(&bad) = columns.iter().find(|&&c| c >= p) {
            return Err(contract(format!("column {bad} outside {p} predictors")));
        }
        let z_columns: Vec<usize> = self
            .z_columns()
            .iter()
            .filter_map(|zc| columns.iter().position(|c| c == zc))
            .collect();
        let studies = self
            .studies
            .iter()
            .map(|s| {
                let x = s.x.select_columns(columns.iter());
                StudyData::new(s.id.clone(), s.y.clone(), x, z_columns.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let names = columns.iter().map(|&c| self.column_names[c].clone()).collect();
        MultiStudyDataset::new(studies, names, self.family)
    }

    /// Drop study `k`, keeping the remaining order.
    pub fn without_study(&self, k: usize) -> Result<Self> {
        if k >= self.k() {
            return Err(contract(format!("study index {k} out of range")));
        }
        let studies = self
            .studies
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, s)| s.clone())
            .collect();
        MultiStudyDataset::new(studies, self.column_names.clone(), self.family)
    }
}

/// Model parameters `θ = (β, γ, τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub tau: f64,
    pub structure: CovStructure,
}

impl Theta {
    pub fn new(beta: Vec<f64>, gamma: Vec<Vec<f64>>, tau: f64, structure: CovStructure) -> Result<Self> {
        let theta = Theta {
            beta,
            gamma,
            tau,
            structure,
        };
        theta.validate()?;
        Ok(theta)
    }

    /// `β = 0`, `Γ = scale · I`, `τ = 1`.
    pub fn initial(p: usize, q: usize, structure: CovStructure, scale: f64) -> Self {
        let gamma = (0..q)
            .map(|t| match structure {
                CovStructure::Full => {
                    let mut g = vec![0.0; t + 1];
                    g[t] = scale;
                    g
                }
                CovStructure::Diagonal => vec![scale],
            })
            .collect();
        Theta {
            beta: vec![0.0; p],
            gamma,
            tau: 1.0,
            structure,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (t, g) in self.gamma.iter().enumerate() {
            let expected = match self.structure {
                CovStructure::Full => t + 1,
                CovStructure::Diagonal => 1,
            };
            if g.len() != expected {
                return Err(contract(format!(
                    "gamma group {t} has {} entries, expected {expected}",
                    g.len()
                )));
            }
            let diag = *g.last().unwrap_or(&0.0);
            if diag < 0.0 {
                return Err(contract(format!(
                    "diagonal of Γ must be nonnegative (group {t} = {diag})"
                )));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(contract(format!("tau must be positive, got {}", self.tau)));
        }
        if self.beta.iter().chain(self.gamma.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(contract("non-finite parameter"));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.gamma.len()
    }

    /// The `q × q` loading matrix.
    pub fn gamma_matrix(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut m = DMatrix::zeros(q, q);
        for (t, g) in self.gamma.iter().enumerate() {
            match self.structure {
                CovStructure::Full => {
                    for (c, &v) in g.iter().enumerate() {
                        m[(t, c)] = v;
                    }
                }
                CovStructure::Diagonal => m[(t, t)] = g[0],
            }
        }
        m
    }

    pub fn flat_gamma(&self) -> Vec<f64> {
        self.gamma.iter().flatten().copied().collect()
    }

    pub fn set_flat_gamma(&mut self, flat: &[f64]) {
        let mut i = 0;
        for g in &mut self.gamma {
            for v in g.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
    }

    /// `ΓΓᵀ`, the between-study covariance of the random contribution.
    pub fn random_covariance(&self) -> DMatrix<f64> {
        let g = self.gamma_matrix();
        &g * g.transpose()
    }

    pub fn selected(&self) -> SelectedSets {
        SelectedSets {
            s1: (0..self.p()).filter(|&j| self.beta[j] != 0.0).collect(),
            s2: (0..self.q())
                .filter(|&t| self.gamma[t].iter().any(|&v| v != 0.0))
                .collect(),
        }
    }

    /// Flip the sign of every column of `Γ` whose diagonal entry is negative.
    /// `ΓΓᵀ` is unchanged; returns the flipped columns.
    pub fn reflect_signs(&mut self) -> Vec<usize> {
        let q = self.q();
        let mut flipped = Vec::new();
        for c in 0..q {
            let diag = match self.structure {
                CovStructure::Full => self.gamma[c][c],
                CovStructure::Diagonal => self.gamma[c][0],
            };
            if diag < 0.0 {
                flipped.push(c);
                match self.structure {
                    CovStructure::Full => {
                        for r in c..q {
                            self.gamma[r][c] = -self.gamma[r][c];
                        }
                    }
                    CovStructure::Diagonal => self.gamma[c][0] = -self.gamma[c][0],
                }
            }
        }
        flipped
    }

    /// Largest absolute difference over all of `β`, `γ` and `τ`.
    pub fn max_abs_diff(&self, other: &Theta) -> f64 {
        let b = self
            .beta
            .iter()
            .zip(&other.beta)
            .map(|(a, b)| (a - b).abs());
        let g = self
            .gamma
            .iter()
            .flatten()
            .zip(other.gamma.iter().flatten())
            .map(|(a, b)| (a - b).abs());
        b.chain(g)
            .chain(std::iter::once((self.tau - other.tau).abs()))
            .fold(0.0, f64::max)
    }
}

/// Indices of nonzero fixed effects (`s1`) and nonzero variance rows (`s2`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedSets {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
}

/// `x'β + z'Γα`.
pub fn linear_predictor(x: &[f64], z: &[f64], theta: &Theta, alpha: &[f64]) -> Result<f64> {
    let q = theta.q();
    if x.len() != theta.p() || z.len() != q || alpha.len() != q {
        return Err(contract(format!(
            "linear predictor dimensions: x {} / p {}, z {} / alpha {} / q {q}",
            x.len(),
            theta.p(),
            z.len(),
            alpha.len()
        )));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(contract("random effects must be finite"));
    }
    let fixed: f64 = x.iter().zip(&theta.beta).map(|(a, b)| a * b).sum();
    let gamma = theta.gamma_matrix();
    let mut random = 0.0;
    for r in 0..q {
        let mut row = 0.0;
        for c in 0..=r {
            row += gamma[(r, c)] * alpha[c];
        }
        random += z[r] * row;
    }
    Ok(fixed + random)
}

/// The 0/1 matrix `J_q` with `vec(Γ) = J_q γ`; `vec` stacks columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JqMatrix {
    q: usize,
    structure: CovStructure,
    /// `(row of vec(Γ), index into γ)` of every unit entry.
    ones: Vec<(usize, usize)>,
}

impl JqMatrix {
    pub fn nrows(&self) -> usize {
        self.q * self.q
    }

    pub fn ncols(&self) -> usize {
        self.structure.gamma_len(self.q)
    }

    pub fn ones(&self) -> &[(usize, usize)] {
        &self.ones
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols());
        for &(r, c) in &self.ones {
            m[(r, c)] = 1.0;
        }
        m
    }

    /// `J_q γ`.
    pub fn apply(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        if gamma.len() != self.ncols() {
            return Err(contract(format!(
                "gamma has {} entries, J_q expects {}",
                gamma.len(),
                self.ncols()
            )));
        }
        let mut out = vec![0.0; self.nrows()];
        for &(r, c) in &self.ones {
            out[r] = gamma[c];
        }
        Ok(out)
    }
}

pub fn build_jq(q: usize, structure: CovStructure) -> Result<JqMatrix> {
    if q == 0 {
        return Err(contract("J_q needs q >= 1"));
    }
    let ones = structure
        .gamma_positions(q)
        .into_iter()
        .enumerate()
        .map(|(g, (r, c))| (c * q + r, g))
        .collect();
    Ok(JqMatrix { q, structure, ones })
}

/// The Monte Carlo "filled-in" design: every subject repeated once per
/// posterior draw of its study's random effects.
///
/// Rows are ordered by (study, subject, draw). The matrices are kept implicit;
/// [`AugmentedDesign::materialize`] builds `X̃` and `Z̃` explicitly.
#[derive(Debug, Clone)]
pub struct AugmentedDesign<'a> {
    dataset: &'a MultiStudyDataset,
    draws: &'a [DMatrix<f64>],
    structure: CovStructure,
    z: Vec<DMatrix<f64>>,
    draws_per_study: usize,
}

/// Pair each study with its `L × q` matrix of random-effect draws.
pub fn augment_design<'a>(
    dataset: &'a MultiStudyDataset,
    draws: &'a [DMatrix<f64>],
    structure: CovStructure,
) -> Result<AugmentedDesign<'a>> {
    if draws.len() != dataset.k() {
        return Err(contract(format!(
            "{} draw matrices for {} studies",
            draws.len(),
            dataset.k()
        )));
    }
    let l = draws[0].nrows();
    let q = dataset.q();
    for (k, d) in draws.iter().enumerate() {
        if d.nrows() != l {
            return Err(contract(format!(
                "study {k} has {} draws, study 0 has {l}",
                d.nrows()
            )));
        }
        if d.ncols() != q {
            return Err(contract(format!(
                "study {k} draws have {} columns, q = {q}",
                d.ncols()
            )));
        }
    }
    if l == 0 {
        return Err(contract("at least one posterior draw per study is required"));
    }
    Ok(AugmentedDesign {
        dataset,
        draws,
        structure,
        z: dataset.studies.iter().map(StudyData::z_matrix).collect(),
        draws_per_study: l,
    })
}

impl<'a> AugmentedDesign<'a> {
    pub fn dataset(&self) -> &'a MultiStudyDataset {
        self.dataset
    }

    pub fn draws(&self) -> &'a [DMatrix<f64>] {
        self.draws
    }

    pub fn structure(&self) -> CovStructure {
        self.structure
    }

    pub fn draws_per_study(&self) -> usize {
        self.draws_per_study
    }

    pub fn n_rows(&self) -> usize {
        self.draws_per_study * self.dataset.n_total()
    }

    pub fn gamma_len(&self) -> usize {
        self.structure.gamma_len(self.dataset.q())
    }

    pub(crate) fn z(&self, k: usize) -> &DMatrix<f64> {
        &self.z[k]
    }

    /// `n_k × L` matrix of random contributions `z_ki'Γα_kl`.
    pub(crate) fn random_offsets(&self, k: usize, gamma: &DMatrix<f64>) -> DMatrix<f64> {
        // (Γ A') is q × L; Z (Γ A') is n × L.
        let ga = gamma * self.draws[k].transpose();
        &self.z[k] * ga
    }

    /// Explicit `(X̃, Z̃, ỹ)`.
    pub fn materialize(&self) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let rows = self.n_rows();
        let p = self.dataset.p();
        let q = self.dataset.q();
        let positions = self.structure.gamma_positions(q);
        let mut xt = DMatrix::zeros(rows, p);
        let mut zt = DMatrix::zeros(rows, positions.len());
        let mut yt = DVector::zeros(rows);
        let mut r = 0;
        for (k, study) in self.dataset.studies.iter().enumerate() {
            let z = &self.z[k];
            let a = &self.draws[k];
            for i in 0..study.n() {
                for l in 0..self.draws_per_study {
                    for j in 0..p {
                        xt[(r, j)] = study.x[(i, j)];
                    }
                    for (g, &(s, c)) in positions.iter().enumerate() {
                        zt[(r, g)] = z[(i, s)] * a[(l, c)];
                    }
                    yt[r] = study.y[i];
                    r += 1;
                }
            }
        }
        (xt, zt, yt)
    }
}
