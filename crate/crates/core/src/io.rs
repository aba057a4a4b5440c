//! File formats: multi-study dataset CSV, `key = value` configuration files,
//! the fit document (JSON), expression matrices, labels, TSP feature tables
//! and screening scores.
//!
//! Every reader takes a `source` name that is echoed in parse errors together
//! with the 1-based line number and the offending column.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::fit::{FitConfig, FitResult};
use crate::model::{CovStructure, Family, MultiStudyDataset, StudyData, Theta};
use crate::penalty::PenaltyKind;
use crate::sim::{Mode, Scenario, Strategy, StrategySettings};
use crate::tsp::{ExpressionStudy, GenePair, ScreenScore};
use crate::tuning::{GridSettings, IcqValue, TuningGrid};

/// Name of the injected all-ones column.
pub const INTERCEPT: &str = "intercept";

fn parse_error(source: &str, line: usize, column: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        column: column.into(),
        message: message.into(),
    }
}

fn csv_error(source: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Csv(e),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => parse_error(
            source,
            line,
            "",
            format!("expected {expected_len} fields, found {len}"),
        ),
        csv::ErrorKind::Utf8 { .. } => parse_error(source, line, "", "invalid UTF-8"),
        _ => parse_error(source, line, "", e.to_string()),
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn source_of(path: &Path) -> String {
    path.display().to_string()
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "none" | "."
    )
}

/// A finite number from one CSV cell.
fn number(cell: &str, source: &str, line: usize, column: &str) -> Result<f64> {
    if is_missing(cell) {
        return Err(parse_error(source, line, column, format!("missing value '{cell}'")));
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_error(source, line, column, format!("'{cell}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(source, line, column, format!("non-finite value '{cell}'")));
    }
    Ok(v)
}

fn headers<R: Read>(rdr: &mut csv::Reader<R>, source: &str) -> Result<Vec<String>> {
    let h: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(source, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if h.is_empty() || h.iter().all(String::is_empty) {
        return Err(parse_error(source, 1, "", "empty header"));
    }
    let mut seen = HashMap::new();
    for (i, name) in h.iter().enumerate() {
        if name.is_empty() {
            return Err(parse_error(source, 1, format!("#{}", i + 1), "empty column name"));
        }
        if seen.insert(name.as_str(), i).is_some() {
            return Err(parse_error(source, 1, name.as_str(), "duplicate column name"));
        }
    }
    Ok(h)
}

fn find_column(header: &[String], name: &str, source: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| parse_error(source, 1, name, "column not found in header"))
}

/// Comma-separated column list; `None`, empty or `"all"` means every column.
pub fn parse_column_list(spec: Option<&str>) -> Option<Vec<String>> {
    let s = spec?.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("all") {
        return None;
    }
    Some(
        s.split(',')
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect(),
    )
}

/// How to interpret the columns of a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub response: String,
    pub study: String,
    pub family: Family,
    /// Predictor columns in model order; `None` takes every column except the
    /// response and study, in file order.
    pub predictors: Option<Vec<String>>,
    /// Predictors that also carry a random effect. The intercept always
    /// does; `None` gives every predictor one.
    pub z_columns: Option<Vec<String>>,
}

impl DatasetSpec {
    pub fn new(response: impl Into<String>, study: impl Into<String>, family: Family) -> Self {
        DatasetSpec {
            response: response.into(),
            study: study.into(),
            family,
            predictors: None,
            z_columns: None,
        }
    }
}

/// Reads a long-format CSV (one row per subject) into a multi-study dataset.
/// Studies appear in order of first occurrence, rows keep file order within a
/// study, and an intercept is prepended as column 0.
pub fn read_dataset<R: Read>(reader: R, source: &str, spec: &DatasetSpec) -> Result<MultiStudyDataset> {
    let mut rdr = csv_reader(reader);
    let header = headers(&mut rdr, source)?;
    let yi = find_column(&header, &spec.response, source)?;
    let si = find_column(&header, &spec.study, source)?;
    if yi == si {
        return Err(parse_error(source, 1, &spec.study, "response and study must be different columns"));
    }
    let predictors: Vec<String> = match &spec.predictors {
        Some(p) => p.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != yi && i != si)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let mut pidx = Vec::with_capacity(predictors.len());
    for name in &predictors {
        if name == INTERCEPT {
            return Err(parse_error(
                source,
                1,
                name.as_str(),
                "the intercept is added automatically and cannot be a data column",
            ));
        }
        let i = find_column(&header, name, source)?;
        if pidx.contains(&i) {
            return Err(parse_error(source, 1, name.as_str(), "predictor listed twice"));
        }
        if i == yi || i == si {
            return Err(parse_error(source, 1, name.as_str(), "response or study column used as a predictor"));
        }
        pidx.push(i);
    }
    let mut z_columns = vec![0usize];
    match &spec.z_columns {
        None => z_columns.extend(1..=predictors.len()),
        Some(names) => {
            for name in names {
                if name == INTERCEPT {
                    continue;
                }
                let j = predictors.iter().position(|p| p == name).ok_or_else(|| {
                    parse_error(source, 1, name.as_str(), "random-effect column is not a model predictor")
                })?;
                if !z_columns.contains(&(j + 1)) {
                    z_columns.push(j + 1);
                }
            }
            z_columns.sort_unstable();
        }
    }

    let p = predictors.len() + 1;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<f64>, Vec<f64>, usize)> = HashMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_error(source, e)),
        }
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let label = &record[si];
        if is_missing(label) {
            return Err(parse_error(source, line, &spec.study, "missing study label"));
        }
        let y = number(&record[yi], source, line, &spec.response)?;
        spec.family
            .validate_response(y)
            .map_err(|e| parse_error(source, line, &spec.response, e.to_string()))?;
        let entry = groups.entry(label.to_string()).or_insert_with(|| {
            order.push(label.to_string());
            (Vec::new(), Vec::new(), line)
        });
        entry.0.push(y);
        entry.1.push(1.0);
        for (name, &i) in predictors.iter().zip(&pidx) {
            entry.1.push(number(&record[i], source, line, name)?);
        }
    }
    if order.is_empty() {
        return Err(parse_error(source, 2, "", "no data rows"));
    }
    let mut studies = Vec::with_capacity(order.len());
    for id in order {
        let (y, flat, first_line) = groups.remove(&id).expect("every label was inserted");
        if y.len() < 2 {
            return Err(parse_error(
                source,
                first_line,
                &spec.study,
                format!("study '{id}' has a single row"),
            ));
        }
        let x = DMatrix::from_row_slice(y.len(), p, &flat);
        studies.push(StudyData::new(id, DVector::from_vec(y), x, z_columns.clone())?);
    }
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(predictors);
    MultiStudyDataset::new(studies, names, spec.family)
}

pub fn load_dataset(path: &Path, spec: &DatasetSpec) -> Result<MultiStudyDataset> {
    read_dataset(open(path)?, &source_of(path), spec)
}

/// Reads the design matrix for `columns` (model order, `"intercept"` filled
/// with ones). Other columns in the file are ignored.
pub fn read_design<R: Read>(reader: R, source: &str, columns: &[String]) -> Result<DMatrix<f64>> {
    let mut rdr = csv_reader(reader);
    let header = headers(&mut rdr, source)?;
    let idx: Vec<Option<usize>> = columns
        .iter()
        .map(|c| {
            if c == INTERCEPT && !header.contains(c) {
                Ok(None)
            } else {
                find_column(&header, c, source).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        for (name, i) in columns.iter().zip(&idx) {
            flat.push(match i {
                None => 1.0,
                Some(i) => number(&rec[*i], source, line, name)?,
            });
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_error(source, 2, "", "no data rows"));
    }
    Ok(DMatrix::from_row_slice(rows, columns.len(), &flat))
}

/// Writes `row,prediction` with shortest round-trip float formatting.
pub fn write_predictions<W: Write>(w: W, predictions: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row", "prediction"])?;
    for (i, v) in predictions.iter().enumerate() {
        out.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    /// Lower-cased key.
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped; keys
/// are case-insensitive and may appear once.
pub fn parse_key_values(text: &str, source: &str) -> Result<Vec<ConfigEntry>> {
    let mut out: Vec<ConfigEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_error(source, line, "", format!("expected 'key = value', got '{content}'")))?;
        let key = key.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(parse_error(source, line, "", "empty key"));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(parse_error(source, line, key, "duplicate key"));
        }
        out.push(ConfigEntry {
            key,
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

impl ConfigEntry {
    fn err(&self, source: &str, message: impl Into<String>) -> Error {
        parse_error(source, self.line, self.key.as_str(), message)
    }

    fn parse<T: std::str::FromStr>(&self, source: &str, what: &str) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.err(source, format!("'{}' is not {what}", self.value)))
    }

    fn list<T: std::str::FromStr>(&self, source: &str, what: &str) -> Result<Vec<T>> {
        let items: Vec<&str> = self
            .value
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if items.is_empty() {
            return Err(self.err(source, "empty list"));
        }
        items
            .into_iter()
            .map(|s| s.parse().map_err(|_| self.err(source, format!("'{s}' is not {what}"))))
            .collect()
    }

    fn real(&self, source: &str) -> Result<f64> {
        let v: f64 = self.parse(source, "a number")?;
        if !v.is_finite() {
            return Err(self.err(source, "value must be finite"));
        }
        Ok(v)
    }

    fn reals(&self, source: &str) -> Result<Vec<f64>> {
        let v: Vec<f64> = self.list(source, "a number")?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err(source, "values must be finite"));
        }
        Ok(v)
    }

    fn flag(&self, source: &str) -> Result<bool> {
        match self.value.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            _ => Err(self.err(source, format!("'{}' is not a boolean", self.value))),
        }
    }
}

/// A parsed simulation file: the scenario grid (every combination of the
/// listed `N`, `K` and `sigma2`, in that nesting order), the strategies to run
/// and their shared settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationPlan {
    pub scenarios: Vec<Scenario>,
    pub strategies: Vec<Strategy>,
    pub settings: StrategySettings,
}

/// Parses a simulation file.
///
/// Scenario keys: `n`, `k`, `sigma2` (lists), `beta` (vector), `p`,
/// `validation_size`, `replications` (or `r`), `seed`, `mode`,
/// `reuse_training_alpha`. Fitting keys: `strategies`, `max_iter`, `tol`,
/// `draws_initial`, `draws_max`, `burnin`, `penalty`, `structure`,
/// `grid_lambda1`, `grid_lambda2`, `grid_min_ratio`, `grid_anchor_ratio`,
/// `separation_bound`, `parallel`.
pub fn parse_simulation(text: &str, source: &str) -> Result<SimulationPlan> {
    let entries = parse_key_values(text, source)?;
    let mut base = Scenario::default();
    let mut ns = vec![base.n];
    let mut ks = vec![base.k];
    let mut sigmas = vec![base.sigma2];
    let mut strategies = Strategy::ALL.to_vec();
    let mut settings = StrategySettings::default();
    let mut beta_given = false;
    let mut p_given = false;
    for e in &entries {
        let s = source;
        match e.key.as_str() {
            "n" => ns = e.list(s, "a sample size")?,
            "k" => ks = e.list(s, "a study count")?,
            "sigma2" => sigmas = e.reals(s)?,
            "beta" => {
                base.beta = e.reals(s)?;
                beta_given = true;
            }
            "p" => {
                base.p = e.parse(s, "a predictor count")?;
                p_given = true;
            }
            "validation_size" => base.validation_size = e.parse(s, "a sample size")?,
            "replications" | "r" => base.replications = e.parse(s, "a replicate count")?,
            "seed" => base.seed = e.parse(s, "an unsigned integer")?,
            "mode" => base.mode = e.value.parse::<Mode>().map_err(|x| e.err(s, x.to_string()))?,
            "reuse_training_alpha" => base.reuse_training_alpha = e.flag(s)?,
            "strategies" => {
                strategies = e
                    .value
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|v| !v.is_empty())
                    .map(|v| v.parse::<Strategy>().map_err(|x| e.err(s, x.to_string())))
                    .collect::<Result<_>>()?;
                if strategies.is_empty() {
                    return Err(e.err(s, "empty list"));
                }
            }
            "max_iter" => settings.fit.max_iter = e.parse(s, "an iteration count")?,
            "tol" => settings.fit.tol = e.real(s)?,
            "draws_initial" => settings.fit.schedule.initial = e.parse(s, "a draw count")?,
            "draws_max" => settings.fit.schedule.max = e.parse(s, "a draw count")?,
            "burnin" => settings.fit.sampler.burnin = e.parse(s, "a sweep count")?,
            "penalty" => {
                let k = e.value.parse::<PenaltyKind>().map_err(|x| e.err(s, x.to_string()))?;
                settings.fit.penalty1 = k;
                settings.fit.penalty2 = k;
                settings.fit.omega = k.default_omega();
            }
            "structure" => {
                settings.fit.structure = Some(e.value.parse::<CovStructure>().map_err(|x| e.err(s, x.to_string()))?)
            }
            "grid_lambda1" => settings.grid.n_lambda1 = e.parse(s, "a grid size")?,
            "grid_lambda2" => settings.grid.n_lambda2 = e.parse(s, "a grid size")?,
            "grid_min_ratio" => settings.grid.min_ratio = e.real(s)?,
            "grid_anchor_ratio" => settings.grid.anchor_ratio = e.real(s)?,
            "separation_bound" => settings.separation_bound = e.real(s)?,
            "parallel" => settings.search.parallel = e.flag(s)?,
            other => return Err(e.err(s, format!("unknown key '{other}'"))),
        }
    }
    if beta_given && !p_given {
        base.p = base.beta.len().saturating_sub(1).max(1);
    }
    settings.mode = base.mode;
    settings.fit.sampler.seed = base.seed;
    let mut scenarios = Vec::with_capacity(ns.len() * ks.len() * sigmas.len());
    for &n in &ns {
        for &k in &ks {
            for &sigma2 in &sigmas {
                let sc = Scenario {
                    n,
                    k,
                    sigma2,
                    ..base.clone()
                };
                sc.validate()
                    .map_err(|e| parse_error(source, 0, "", format!("scenario N={n}, K={k}, sigma2={sigma2}: {e}")))?;
                scenarios.push(sc);
            }
        }
    }
    Ok(SimulationPlan {
        scenarios,
        strategies,
        settings,
    })
}

/// A grid file: `lambda1` and `lambda2` lists, optional `anchor1`/`anchor2`.
/// A missing anchor defaults to `min(0.01·max, min)` of its axis.
pub fn parse_grid(text: &str, source: &str) -> Result<TuningGrid> {
    let entries = parse_key_values(text, source)?;
    let mut l1 = None;
    let mut l2 = None;
    let mut a1 = None;
    let mut a2 = None;
    for e in &entries {
        match e.key.as_str() {
            "lambda1" => l1 = Some(e.reals(source)?),
            "lambda2" => l2 = Some(e.reals(source)?),
            "anchor1" => a1 = Some(e.real(source)?),
            "anchor2" => a2 = Some(e.real(source)?),
            other => return Err(e.err(source, format!("unknown key '{other}'"))),
        }
    }
    let missing = |k: &str| parse_error(source, 0, k, "required key is missing");
    let l1: Vec<f64> = l1.ok_or_else(|| missing("lambda1"))?;
    let l2: Vec<f64> = l2.ok_or_else(|| missing("lambda2"))?;
    let default_anchor = |v: &[f64]| {
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        (0.01 * max).min(min)
    };
    let anchor = (a1.unwrap_or_else(|| default_anchor(&l1)), a2.unwrap_or_else(|| default_anchor(&l2)));
    TuningGrid::new(l1, l2, anchor).map_err(|e| parse_error(source, 0, "", e.to_string()))
}

/// Grid settings from a file whose keys are `n_lambda1`, `n_lambda2`,
/// `min_ratio` and `anchor_ratio` (all optional).
pub fn parse_grid_settings(text: &str, source: &str) -> Result<GridSettings> {
    let mut g = GridSettings::default();
    for e in parse_key_values(text, source)? {
        match e.key.as_str() {
            "n_lambda1" => g.n_lambda1 = e.parse(source, "a grid size")?,
            "n_lambda2" => g.n_lambda2 = e.parse(source, "a grid size")?,
            "min_ratio" => g.min_ratio = e.real(source)?,
            "anchor_ratio" => g.anchor_ratio = e.real(source)?,
            other => return Err(e.err(source, format!("unknown key '{other}'"))),
        }
    }
    Ok(g)
}

/// Either an explicit grid or a data-driven one.
#[derive(Debug, Clone, PartialEq)]
pub enum GridFile {
    Explicit(TuningGrid),
    Settings(GridSettings),
}

/// An explicit grid when the file lists `lambda1`, otherwise grid settings.
pub fn parse_grid_file(text: &str, source: &str) -> Result<GridFile> {
    let entries = parse_key_values(text, source)?;
    if entries.iter().any(|e| e.key == "lambda1" || e.key == "lambda2") {
        parse_grid(text, source).map(GridFile::Explicit)
    } else {
        parse_grid_settings(text, source).map(GridFile::Settings)
    }
}

/// Names of the selected fixed and random effects.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedNames {
    pub fixed: Vec<String>,
    pub random: Vec<String>,
}

/// Convergence record of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub q1_trace: Vec<f64>,
    pub q2_trace: Vec<f64>,
    /// Final E-step acceptance rates, one vector per study.
    pub acceptance: Vec<Vec<f64>>,
    pub draws_per_study: usize,
}

/// The JSON document written by `fit` and `tune` and read by `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub format_version: u32,
    pub family: Family,
    /// Fixed-effect column names, intercept first.
    pub columns: Vec<String>,
    /// Columns carrying a random effect.
    pub random_columns: Vec<String>,
    pub studies: Vec<String>,
    pub n_total: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub penalty1: PenaltyKind,
    pub penalty2: PenaltyKind,
    pub omega: f64,
    pub seed: u64,
    pub theta: Theta,
    pub selected: SelectedNames,
    /// ICQ pieces, evaluated on the anchor draws when tuning and on the fit's
    /// own draws otherwise.
    pub icq: Option<IcqValue>,
    pub diagnostics: FitDiagnostics,
}

impl FitDocument {
    pub const VERSION: u32 = 1;

    pub fn new(fit: &FitResult, dataset: &MultiStudyDataset, config: &FitConfig, icq: Option<IcqValue>) -> Result<Self> {
        if fit.theta.p() != dataset.p() || fit.theta.q() != dataset.q() {
            return Err(contract("fit and dataset dimensions differ"));
        }
        let z = dataset.z_columns();
        let random_columns: Vec<String> = z.iter().map(|&j| dataset.column_names[j].clone()).collect();
        let selected = SelectedNames {
            fixed: fit.selected.s1.iter().map(|&j| dataset.column_names[j].clone()).collect(),
            random: fit.selected.s2.iter().map(|&t| random_columns[t].clone()).collect(),
        };
        Ok(FitDocument {
            format_version: Self::VERSION,
            family: fit.family,
            columns: dataset.column_names.clone(),
            random_columns,
            studies: dataset.studies.iter().map(|s| s.id.clone()).collect(),
            n_total: fit.n_total,
            lambda1: fit.lambda1,
            lambda2: fit.lambda2,
            penalty1: config.penalty1,
            penalty2: config.penalty2,
            omega: config.omega,
            seed: config.sampler.seed,
            theta: fit.theta.clone(),
            selected,
            icq,
            diagnostics: FitDiagnostics {
                converged: fit.converged,
                iterations: fit.iterations,
                q1_trace: fit.q1_trace.clone(),
                q2_trace: fit.q2_trace.clone(),
                acceptance: fit.diagnostics.iter().map(|d| d.acceptance.clone()).collect(),
                draws_per_study: fit.draws.first().map_or(0, |d| d.nrows()),
            },
        })
    }

    /// Checks internal consistency after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != Self::VERSION {
            return Err(Error::Unsupported(format!(
                "fit document version {} (expected {})",
                self.format_version,
                Self::VERSION
            )));
        }
        self.theta.validate()?;
        if self.columns.len() != self.theta.p() {
            return Err(contract(format!(
                "{} column names for {} coefficients",
                self.columns.len(),
                self.theta.p()
            )));
        }
        if self.random_columns.len() != self.theta.q() {
            return Err(contract(format!(
                "{} random-effect names for q = {}",
                self.random_columns.len(),
                self.theta.q()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FitDocument = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fitted means for a design whose columns follow [`FitDocument::columns`].
    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<Vec<f64>> {
        crate::fit::predict(&self.theta, self.family, x_new)
    }
}

/// Response (and optional study) per sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labels {
    pub response: HashMap<String, f64>,
    pub study: HashMap<String, String>,
}

/// Reads a labels CSV with columns `sample`, `response` and optionally
/// `study`. Responses must be 0 or 1.
pub fn read_labels<R: Read>(reader: R, source: &str) -> Result<Labels> {
    let mut rdr = csv_reader(reader);
    let header = headers(&mut rdr, source)?;
    let si = find_column(&header, "sample", source)?;
    let yi = find_column(&header, "response", source)?;
    let ki = header.iter().position(|h| h == "study");
    let mut labels = Labels::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec[si].to_string();
        if id.is_empty() {
            return Err(parse_error(source, line, "sample", "empty sample id"));
        }
        let y = number(&rec[yi], source, line, "response")?;
        if y != 0.0 && y != 1.0 {
            return Err(parse_error(source, line, "response", format!("'{}' is not 0 or 1", &rec[yi])));
        }
        if labels.response.insert(id.clone(), y).is_some() {
            return Err(parse_error(source, line, "sample", format!("sample '{id}' listed twice")));
        }
        if let Some(k) = ki {
            labels.study.insert(id, rec[k].to_string());
        }
    }
    Ok(labels)
}

pub fn load_labels(path: &Path) -> Result<Labels> {
    read_labels(open(path)?, &source_of(path))
}

/// Reads an expression CSV: first column the sample id, one column per gene,
/// one row per sample. With `labels`, every sample must have a response.
pub fn read_expression<R: Read>(
    reader: R,
    source: &str,
    study_id: &str,
    labels: Option<&Labels>,
) -> Result<ExpressionStudy> {
    let mut rdr = csv_reader(reader);
    let header = headers(&mut rdr, source)?;
    if header.len() < 2 {
        return Err(parse_error(source, 1, "", "need a sample column and at least one gene"));
    }
    let genes: Vec<String> = header[1..].to_vec();
    let mut samples = Vec::new();
    let mut flat = Vec::new();
    let mut response = labels.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_error(source, line, header[0].as_str(), "empty sample id"));
        }
        for (g, cell) in genes.iter().zip(rec.iter().skip(1)) {
            flat.push(number(cell, source, line, g)?);
        }
        if let (Some(l), Some(r)) = (labels, response.as_mut()) {
            let y = l
                .response
                .get(&id)
                .ok_or_else(|| parse_error(source, line, header[0].as_str(), format!("sample '{id}' has no label")))?;
            r.push(*y);
        }
        samples.push(id);
    }
    if samples.is_empty() {
        return Err(parse_error(source, 2, "", "no samples"));
    }
    let values = DMatrix::from_row_slice(samples.len(), genes.len(), &flat);
    ExpressionStudy::new(study_id, samples, genes, values, response)
        .map_err(|e| parse_error(source, 1, "", e.to_string()))
}

/// Study id from a file name: the stem.
pub fn study_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| source_of(path))
}

pub fn load_expression(path: &Path, labels: Option<&Labels>) -> Result<ExpressionStudy> {
    read_expression(open(path)?, &source_of(path), &study_id_of(path), labels)
}

/// Reads a pair list with columns `gene_a` and `gene_b`.
pub fn read_pairs<R: Read>(reader: R, source: &str) -> Result<Vec<GenePair>> {
    let mut rdr = csv_reader(reader);
    let header = headers(&mut rdr, source)?;
    let ai = find_column(&header, "gene_a", source)?;
    let bi = find_column(&header, "gene_b", source)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let pair = GenePair::new(&rec[ai], &rec[bi]).map_err(|e| parse_error(source, line, "gene_b", e.to_string()))?;
        out.push(pair);
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<GenePair>> {
    read_pairs(open(path)?, &source_of(path))
}

pub fn write_pairs<W: Write>(w: W, pairs: &[GenePair]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["gene_a", "gene_b", "name"])?;
    for p in pairs {
        out.write_record([p.a.as_str(), p.b.as_str(), &p.name()])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the binary TSP features of every study, stacked: `sample`, `study`,
/// `response` (when all studies carry one) and one `A_B` column per pair.
pub fn write_features<W: Write>(w: W, studies: &[ExpressionStudy], pairs: &[GenePair]) -> Result<()> {
    let with_response = studies.iter().all(|s| s.response.is_some());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["sample".to_string(), "study".to_string()];
    if with_response {
        header.push("response".into());
    }
    header.extend(pairs.iter().map(GenePair::name));
    out.write_record(&header)?;
    for s in studies {
        let m = crate::tsp::tsp_transform(s, pairs)?;
        for i in 0..s.n_samples() {
            let mut rec = vec![s.samples[i].clone(), s.id.clone()];
            if let Some(r) = &s.response {
                rec.push(format!("{}", r[i]));
            }
            rec.extend((0..pairs.len()).map(|j| if m[(i, j)] > 0.5 { "1" } else { "0" }.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// A feature table read back for screening.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    /// One column per feature.
    pub columns: Vec<Vec<f64>>,
    pub response: Vec<f64>,
    /// Study index per row, into `studies`.
    pub study: Vec<usize>,
    pub studies: Vec<String>,
    /// Sample ids when the file has a `sample` column.
    pub samples: Option<Vec<String>>,
}

/// Reads a feature table: every column other than `response`, `study` and
/// `sample` is a 0/1 feature.
pub fn read_features<R: Read>(reader: R, source: &str, response: &str, study: &str) -> Result<FeatureTable> {
    let mut rdr = csv_reader(reader);
    let header = headers(&mut rdr, source)?;
    let yi = find_column(&header, response, source)?;
    let si = find_column(&header, study, source)?;
    if yi == si {
        return Err(parse_error(source, 1, study, "response and study must be different columns"));
    }
    let sample_i = header.iter().position(|h| h == "sample").filter(|&i| i != yi && i != si);
    let fidx: Vec<usize> = (0..header.len())
        .filter(|&i| i != yi && i != si && Some(i) != sample_i)
        .collect();
    if fidx.is_empty() {
        return Err(parse_error(source, 1, "", "no feature columns"));
    }
    let mut table = FeatureTable {
        names: fidx.iter().map(|&i| header[i].clone()).collect(),
        columns: vec![Vec::new(); fidx.len()],
        response: Vec::new(),
        study: Vec::new(),
        studies: Vec::new(),
        samples: sample_i.map(|_| Vec::new()),
    };
    let mut study_index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(source, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let y = number(&rec[yi], source, line, response)?;
        if y != 0.0 && y != 1.0 {
            return Err(parse_error(source, line, response, format!("'{}' is not 0 or 1", &rec[yi])));
        }
        let label = &rec[si];
        if is_missing(label) {
            return Err(parse_error(source, line, study, "missing study label"));
        }
        let next = study_index.len();
        let k = *study_index.entry(label.to_string()).or_insert_with(|| {
            table.studies.push(label.to_string());
            next
        });
        for (col, &i) in table.columns.iter_mut().zip(&fidx) {
            let v = number(&rec[i], source, line, &header[i])?;
            if v != 0.0 && v != 1.0 {
                return Err(parse_error(source, line, header[i].as_str(), format!("'{}' is not 0 or 1", &rec[i])));
            }
            col.push(v);
        }
        table.response.push(y);
        table.study.push(k);
        if let (Some(i), Some(s)) = (sample_i, table.samples.as_mut()) {
            s.push(rec[i].to_string());
        }
    }
    if table.response.is_empty() {
        return Err(parse_error(source, 2, "", "no data rows"));
    }
    Ok(table)
}

pub fn load_features(path: &Path, response: &str, study: &str) -> Result<FeatureTable> {
    read_features(open(path)?, &source_of(path), response, study)
}

/// Splits an `A_B` feature name into its pair. Names with more or fewer than
/// one underscore are ambiguous; pass a pair list instead.
pub fn pair_from_name(name: &str) -> Result<GenePair> {
    let parts: Vec<&str> = name.split('_').collect();
    match parts.as_slice() {
        [a, b] if !a.is_empty() && !b.is_empty() => GenePair::new(*a, *b),
        _ => Err(contract(format!(
            "cannot split feature '{name}' into two genes; supply the pair list"
        ))),
    }
}

/// One line of the screening report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub name: String,
    pub score: ScreenScore,
    pub kept: bool,
    pub selected: bool,
}

/// Writes the screening report, best first.
pub fn write_scores<W: Write>(w: W, rows: &[ScoreRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "rank",
        "feature",
        "loglik",
        "intercept",
        "slope",
        "sd_intercept",
        "sd_slope",
        "informative",
        "kept",
        "selected",
    ])?;
    for (i, r) in rows.iter().enumerate() {
        out.write_record([
            (i + 1).to_string(),
            r.name.clone(),
            r.score.loglik.to_string(),
            r.score.intercept.to_string(),
            r.score.slope.to_string(),
            r.score.sd_intercept.to_string(),
            r.score.sd_slope.to_string(),
            r.score.informative.to_string(),
            r.kept.to_string(),
            r.selected.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the selected feature columns in dataset layout (`sample` if known,
/// `study`, `response`, features), ready for `fit`.
pub fn write_selected<W: Write>(w: W, table: &FeatureTable, selected: &[usize]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = Vec::new();
    if table.samples.is_some() {
        header.push("sample".to_string());
    }
    header.extend(["study".to_string(), "response".to_string()]);
    header.extend(selected.iter().map(|&j| table.names[j].clone()));
    out.write_record(&header)?;
    for i in 0..table.response.len() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(s) = &table.samples {
            rec.push(s[i].clone());
        }
        rec.push(table.studies[table.study[i]].clone());
        rec.push(table.response[i].to_string());
        rec.extend(selected.iter().map(|&j| table.columns[j][i].to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a multi-study dataset in the long CSV layout read by
/// [`read_dataset`] (`study`, `y`, predictors without the intercept).
pub fn write_dataset<W: Write>(w: W, dataset: &MultiStudyDataset) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["study".to_string(), "y".to_string()];
    header.extend(dataset.column_names.iter().skip(1).cloned());
    out.write_record(&header)?;
    for s in &dataset.studies {
        for i in 0..s.n() {
            let mut rec = vec![s.id.clone(), s.y[i].to_string()];
            rec.extend((1..s.p()).map(|j| s.x[(i, j)].to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-study medians of holdout absolute errors.
pub fn write_holdout<W: Write>(w: W, results: &[crate::sim::HoldoutResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["study", "n", "pe_med_pglmm", "pe_med_pglm_merged", "pe_med_pglm_per_study"])?;
    for r in results {
        let (a, b, c) = r.medians();
        out.write_record([r.study.clone(), r.pglmm.len().to_string(), a.to_string(), b.to_string(), c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
