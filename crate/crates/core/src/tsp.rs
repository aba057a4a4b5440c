//! Top-scoring-pair features: rank-based binary indicators built from raw
//! expression, and the screening pipeline that ranks them by the marginal
//! likelihood of a random-intercept, random-slope logistic model.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use log::warn;
use nalgebra::{DMatrix, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::softplus;
use crate::quadrature::{adaptive_log_integral, nelder_mead, LogIntegrand2, NelderMeadOptions, Rule2};

/// Nodes per dimension of the screening quadrature.
pub const SCREEN_NODES: usize = 9;

/// One study's expression matrix (samples × genes) and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionStudy {
    pub id: String,
    pub samples: Vec<String>,
    pub genes: Vec<String>,
    pub values: DMatrix<f64>,
    pub response: Option<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ExpressionStudy {
    pub fn new(
        id: impl Into<String>,
        samples: Vec<String>,
        genes: Vec<String>,
        values: DMatrix<f64>,
        response: Option<Vec<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        if values.nrows() != samples.len() || values.ncols() != genes.len() {
            return Err(contract(format!(
                "study '{id}': {}×{} values for {} samples and {} genes",
                values.nrows(),
                values.ncols(),
                samples.len(),
                genes.len()
            )));
        }
        let mut index = HashMap::with_capacity(genes.len());
        for (j, g) in genes.iter().enumerate() {
            if index.insert(g.clone(), j).is_some() {
                return Err(contract(format!("study '{id}': gene '{g}' appears twice")));
            }
        }
        if let Some((i, j)) = (0..values.nrows())
            .flat_map(|i| (0..values.ncols()).map(move |j| (i, j)))
            .find(|&(i, j)| !values[(i, j)].is_finite())
        {
            return Err(contract(format!(
                "study '{id}': non-finite expression for sample '{}', gene '{}'",
                samples[i], genes[j]
            )));
        }
        if let Some(y) = &response {
            if y.len() != samples.len() {
                return Err(contract(format!(
                    "study '{id}': {} responses for {} samples",
                    y.len(),
                    samples.len()
                )));
            }
            if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::InvalidResponse {
                    family: "bernoulli".into(),
                    value: *v,
                });
            }
        }
        Ok(ExpressionStudy {
            id,
            samples,
            genes,
            values,
            response,
            index,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn gene_index(&self, gene: &str) -> Result<usize> {
        self.index.get(gene).copied().ok_or_else(|| Error::UnknownGene {
            gene: gene.to_string(),
            study: self.id.clone(),
        })
    }
}

/// An ordered gene pair; the indicator is `I(g_a > g_b)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GenePair {
    pub a: String,
    pub b: String,
}

impl GenePair {
    /// Orders the two genes lexicographically.
    pub fn new(x: impl Into<String>, y: impl Into<String>) -> Result<Self> {
        let (x, y) = (x.into(), y.into());
        if x == y {
            return Err(contract(format!("a pair needs two distinct genes, got '{x}' twice")));
        }
        Ok(if x < y { GenePair { a: x, b: y } } else { GenePair { a: y, b: x } })
    }

    /// `"A_B"`.
    pub fn name(&self) -> String {
        format!("{}_{}", self.a, self.b)
    }
}

impl fmt::Display for GenePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.a, self.b)
    }
}

/// Genes present in every study, sorted.
pub fn common_genes(studies: &[ExpressionStudy]) -> Vec<String> {
    let Some(first) = studies.first() else {
        return Vec::new();
    };
    let mut genes: Vec<String> = first
        .genes
        .iter()
        .filter(|g| studies[1..].iter().all(|s| s.index.contains_key(*g)))
        .cloned()
        .collect();
    genes.sort();
    genes.dedup();
    genes
}

/// All `G(G−1)/2` pairs of distinct genes in lexicographic order.
pub fn enumerate_pairs(genes: &[String]) -> Result<Vec<GenePair>> {
    let mut sorted = genes.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(contract(format!("need at least two distinct genes, got {}", sorted.len())));
    }
    let g = sorted.len();
    let mut out = Vec::with_capacity(g * (g - 1) / 2);
    for i in 0..g {
        for j in i + 1..g {
            out.push(GenePair {
                a: sorted[i].clone(),
                b: sorted[j].clone(),
            });
        }
    }
    Ok(out)
}

/// Samples × pairs matrix of `I(g_a > g_b)`; ties give 0.
pub fn tsp_transform(study: &ExpressionStudy, pairs: &[GenePair]) -> Result<DMatrix<f64>> {
    let idx: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| Ok((study.gene_index(&p.a)?, study.gene_index(&p.b)?)))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(study.n_samples(), pairs.len(), |i, j| {
        let (a, b) = idx[j];
        if study.values[(i, a)] > study.values[(i, b)] {
            1.0
        } else {
            0.0
        }
    }))
}

/// Maximized marginal likelihood of the screening model for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenScore {
    /// Maximized marginal log-likelihood (higher is better).
    pub loglik: f64,
    pub intercept: f64,
    pub slope: f64,
    /// Standard deviations of the random intercept and random slope.
    pub sd_intercept: f64,
    pub sd_slope: f64,
    /// `false` when the column is constant, so no slope can be estimated.
    pub informative: bool,
}

/// One study's data collapsed to distinct `(x, y)` cells with counts.
#[derive(Debug, Clone)]
struct Cells {
    x: Vec<f64>,
    y: Vec<f64>,
    count: Vec<f64>,
}

fn collapse(x: &[f64], y: &[f64]) -> Cells {
    let mut map: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for (a, b) in x.iter().zip(y) {
        *map.entry((a.to_bits(), b.to_bits())).or_insert(0.0) += 1.0;
    }
    Cells {
        x: map.keys().map(|(a, _)| f64::from_bits(*a)).collect(),
        y: map.keys().map(|(_, b)| f64::from_bits(*b)).collect(),
        count: map.values().copied().collect(),
    }
}

/// `h(u) = Σ c·log f(y | x; β + D u) + log φ₂(u)` for one study.
struct StudyIntegrand<'a> {
    cells: &'a Cells,
    b0: f64,
    b1: f64,
    s0: f64,
    s1: f64,
}

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

impl LogIntegrand2 for StudyIntegrand<'_> {
    fn value(&self, u: &Vector2<f64>) -> f64 {
        let c = self.cells;
        let mut v = -0.5 * u.norm_squared() - LOG_2PI;
        for i in 0..c.x.len() {
            let eta = self.b0 + self.s0 * u[0] + (self.b1 + self.s1 * u[1]) * c.x[i];
            v += c.count[i] * (c.y[i] * eta - softplus(eta));
        }
        v
    }

    fn derivatives(&self, u: &Vector2<f64>) -> (f64, Vector2<f64>, Matrix2<f64>) {
        let c = self.cells;
        let mut v = -0.5 * u.norm_squared() - LOG_2PI;
        let mut g = -u;
        let mut h = -Matrix2::identity();
        for i in 0..c.x.len() {
            let d = Vector2::new(self.s0, self.s1 * c.x[i]);
            let eta = self.b0 + self.s0 * u[0] + (self.b1 + self.s1 * u[1]) * c.x[i];
            let p = crate::model::sigmoid(eta);
            v += c.count[i] * (c.y[i] * eta - softplus(eta));
            g += d * (c.count[i] * (c.y[i] - p));
            h -= d * d.transpose() * (c.count[i] * p * (1.0 - p));
        }
        (v, g, h)
    }
}

/// Data for the screening model: one predictor column, binary responses and
/// study labels, collapsed per study.
#[derive(Debug, Clone)]
pub struct ScreenModel {
    studies: Vec<Cells>,
    rule: Rule2,
    constant: bool,
}

/// Bounds on the log standard deviations explored by the optimizer.
const LOG_SD_RANGE: (f64, f64) = (-12.0, 3.0);

/// A log standard deviation at or below the lower bound means exactly zero.
fn sd_from_log(v: f64) -> f64 {
    if v <= LOG_SD_RANGE.0 {
        0.0
    } else {
        v.min(LOG_SD_RANGE.1).exp()
    }
}

impl ScreenModel {
    pub fn new(x: &[f64], y: &[f64], study: &[usize]) -> Result<Self> {
        if x.len() != y.len() || x.len() != study.len() {
            return Err(contract(format!(
                "column, response and label lengths differ ({}, {}, {})",
                x.len(),
                y.len(),
                study.len()
            )));
        }
        if x.is_empty() {
            return Err(contract("screening needs at least one sample"));
        }
        if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::InvalidResponse {
                family: "bernoulli".into(),
                value: *v,
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(contract("screening column has non-finite entries"));
        }
        let mut labels: Vec<usize> = study.to_vec();
        labels.sort_unstable();
        labels.dedup();
        let studies = labels
            .iter()
            .map(|&k| {
                let (xs, ys): (Vec<f64>, Vec<f64>) = x
                    .iter()
                    .zip(y)
                    .zip(study)
                    .filter(|(_, s)| **s == k)
                    .map(|((a, b), _)| (*a, *b))
                    .unzip();
                collapse(&xs, &ys)
            })
            .collect();
        let constant = x.iter().all(|v| *v == x[0]);
        Ok(ScreenModel {
            studies,
            rule: Rule2::new(SCREEN_NODES)?,
            constant,
        })
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    /// Marginal log-likelihood at `(β0, β1, log σ0, log σ1)`.
    pub fn loglik(&self, params: &[f64; 4]) -> Result<f64> {
        let (s0, s1) = (sd_from_log(params[2]), sd_from_log(params[3]));
        self.studies.iter().try_fold(0.0, |acc, cells| {
            let h = StudyIntegrand {
                cells,
                b0: params[0],
                b1: params[1],
                s0,
                s1,
            };
            Ok(acc + adaptive_log_integral(&h, &self.rule)?)
        })
    }

    fn start(&self) -> [f64; 4] {
        let (mut n, mut s) = ([0.5f64; 2], [0.25f64; 2]);
        for c in &self.studies {
            for i in 0..c.x.len() {
                let g = usize::from(c.x[i] != 0.0);
                n[g] += c.count[i];
                s[g] += c.count[i] * c.y[i];
            }
        }
        let logit = |s: f64, n: f64| (s / (n - s)).ln();
        let b0 = logit(s[0], n[0]);
        let b1 = if self.constant { 0.0 } else { logit(s[1], n[1]) - b0 };
        [b0, b1, 0.5f64.ln(), 0.5f64.ln()]
    }

    /// Maximizes the marginal likelihood. A constant column is scored by the
    /// random-intercept model with slope and slope variance fixed at zero.
    pub fn fit(&self) -> Result<ScreenScore> {
        let start = self.start();
        let opts = NelderMeadOptions {
            max_evals: 1500,
            f_tol: 1e-9,
            step: 0.5,
        };
        let objective = |p: [f64; 4]| self.loglik(&p).map(|v| -v).unwrap_or(f64::INFINITY);
        let (params, value) = if self.constant {
            let m = nelder_mead(
                |v| objective([v[0], 0.0, v[1], LOG_SD_RANGE.0]),
                &[start[0], start[2]],
                &opts,
            );
            ([m.x[0], 0.0, m.x[1], LOG_SD_RANGE.0], m.value)
        } else {
            let m = nelder_mead(|v| objective([v[0], v[1], v[2], v[3]]), &start, &opts);
            ([m.x[0], m.x[1], m.x[2], m.x[3]], m.value)
        };
        if !value.is_finite() {
            return Err(contract("screening likelihood could not be evaluated"));
        }
        let sd = sd_from_log;
        Ok(ScreenScore {
            loglik: -value,
            intercept: params[0],
            slope: params[1],
            sd_intercept: sd(params[2]),
            sd_slope: if self.constant { 0.0 } else { sd(params[3]) },
            informative: !self.constant,
        })
    }
}

/// Scores one predictor column (merged across studies) by the maximized
/// marginal likelihood of a logistic model with a random intercept and a
/// random slope per study.
pub fn screen_univariate(x: &[f64], y: &[f64], study: &[usize]) -> Result<ScreenScore> {
    ScreenModel::new(x, y, study)?.fit()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedPair {
    pub pair: GenePair,
    pub score: ScreenScore,
}

/// Keeps a pair iff neither gene appears in an already kept pair.
pub fn dedup_ranked(ranked: &[GenePair]) -> Vec<GenePair> {
    let mut used: HashSet<&str> = HashSet::new();
    let mut kept = Vec::new();
    for p in ranked {
        if !used.contains(p.a.as_str()) && !used.contains(p.b.as_str()) {
            used.insert(&p.a);
            used.insert(&p.b);
            kept.push(p.clone());
        }
    }
    kept
}

/// The first `min(m, len)` items.
pub fn select_top<T: Clone>(filtered: &[T], m: usize) -> Result<Vec<T>> {
    if m == 0 {
        return Err(contract("must select at least one feature"));
    }
    if filtered.len() < m {
        warn!("only {} features available, fewer than the requested {m}", filtered.len());
    }
    Ok(filtered.iter().take(m).cloned().collect())
}

/// Output of [`screen_pipeline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    /// Every candidate pair, best first (ties by pair name).
    pub ranked: Vec<ScreenedPair>,
    /// `kept[i]` is true when `ranked[i]` survives deduplication.
    pub kept: Vec<bool>,
    /// The top `m` kept pairs.
    pub selected: Vec<GenePair>,
}

/// Merged responses and labels of studies that all carry responses.
fn merged_labels(studies: &[ExpressionStudy]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut y = Vec::new();
    let mut labels = Vec::new();
    for (k, s) in studies.iter().enumerate() {
        let r = s
            .response
            .as_ref()
            .ok_or_else(|| contract(format!("study '{}' has no responses to screen against", s.id)))?;
        y.extend_from_slice(r);
        labels.extend(std::iter::repeat_n(k, r.len()));
    }
    Ok((y, labels))
}

/// Scores `pairs` on the merged studies and sorts them best first.
pub fn rank_pairs(studies: &[ExpressionStudy], pairs: &[GenePair], parallel: bool) -> Result<Vec<ScreenedPair>> {
    if studies.is_empty() {
        return Err(contract("screening needs at least one study"));
    }
    let (y, labels) = merged_labels(studies)?;
    let score = |p: &GenePair| -> Result<ScreenedPair> {
        let mut x = Vec::with_capacity(y.len());
        for s in studies {
            let (a, b) = (s.gene_index(&p.a)?, s.gene_index(&p.b)?);
            x.extend((0..s.n_samples()).map(|i| if s.values[(i, a)] > s.values[(i, b)] { 1.0 } else { 0.0 }));
        }
        Ok(ScreenedPair {
            pair: p.clone(),
            score: screen_univariate(&x, &y, &labels)?,
        })
    };
    let mut ranked: Vec<ScreenedPair> = if parallel {
        pairs.par_iter().map(score).collect::<Result<_>>()?
    } else {
        pairs.iter().map(score).collect::<Result<_>>()?
    };
    ranked.sort_by(|a, b| {
        b.score
            .loglik
            .total_cmp(&a.score.loglik)
            .then_with(|| a.pair.name().cmp(&b.pair.name()))
    });
    Ok(ranked)
}

/// Intersection genes → all pairs → screening → dedup → top `m`.
pub fn screen_pipeline(studies: &[ExpressionStudy], m: usize, parallel: bool) -> Result<ScreenReport> {
    let genes = common_genes(studies);
    let pairs = enumerate_pairs(&genes)?;
    let ranked = rank_pairs(studies, &pairs, parallel)?;
    let order: Vec<GenePair> = ranked.iter().map(|r| r.pair.clone()).collect();
    let kept_pairs = dedup_ranked(&order);
    let kept_set: HashSet<&GenePair> = kept_pairs.iter().collect();
    let kept = order.iter().map(|p| kept_set.contains(p)).collect();
    let selected = select_top(&kept_pairs, m)?;
    Ok(ScreenReport { ranked, kept, selected })
}
