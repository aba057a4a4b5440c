//! ICQ model selection over a `(λ1, λ2)` grid.

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::fit::objective::{model_dimension, q1_gradient, q1_value, q2_value};
use crate::fit::{fit, fit_from, FitConfig, FitResult};
use crate::glm::{glm_lambda_max, log_spaced};
use crate::model::{augment_design, MultiStudyDataset};

/// Descending `λ1` and `λ2` values plus the near-unpenalized anchor whose
/// posterior draws score every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub anchor: (f64, f64),
}

impl TuningGrid {
    pub fn new(mut lambda1: Vec<f64>, mut lambda2: Vec<f64>, anchor: (f64, f64)) -> Result<Self> {
        if lambda1.is_empty() || lambda2.is_empty() {
            return Err(contract("tuning grid must have at least one value per axis"));
        }
        if lambda1.iter().chain(&lambda2).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(contract("grid values must be finite and nonnegative"));
        }
        lambda1.sort_by(|a, b| b.total_cmp(a));
        lambda2.sort_by(|a, b| b.total_cmp(a));
        let (a1, a2) = anchor;
        let min1 = *lambda1.last().unwrap();
        let min2 = *lambda2.last().unwrap();
        if !(a1 >= 0.0 && a2 >= 0.0) || a1 > min1 || a2 > min2 {
            return Err(contract(format!(
                "anchor ({a1}, {a2}) must not exceed the smallest grid values ({min1}, {min2})"
            )));
        }
        Ok(TuningGrid {
            lambda1,
            lambda2,
            anchor,
        })
    }

    /// `n1 × n2` log-spaced grid from the maxima down to `min_ratio` of them,
    /// anchored at `anchor_ratio` of the maxima.
    pub fn log_spaced(
        lambda1_max: f64,
        lambda2_max: f64,
        n1: usize,
        n2: usize,
        min_ratio: f64,
        anchor_ratio: f64,
    ) -> Result<Self> {
        TuningGrid::new(
            log_spaced(lambda1_max, min_ratio, n1),
            log_spaced(lambda2_max, min_ratio, n2),
            (anchor_ratio * lambda1_max, anchor_ratio * lambda2_max),
        )
    }

    pub fn len(&self) -> usize {
        self.lambda1.len() * self.lambda2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Grid maxima: the dead-zone bound of `λ1` on the merged GLM, and for `λ2`
/// the largest group score norm at `γ_t = 0` under the given pilot fit's draws.
pub fn lambda_max(dataset: &MultiStudyDataset, config: &FitConfig, pilot: &FitResult) -> Result<(f64, f64)> {
    let (x, y) = dataset.merged();
    let l1 = glm_lambda_max(&x, &y, dataset.family, &config.unpenalized_beta)?;
    let aug = augment_design(dataset, &pilot.draws, pilot.theta.structure)?;
    let mut l2 = 0.0f64;
    for t in 0..pilot.theta.q() {
        if config.unpenalized_groups.contains(&t) {
            continue;
        }
        // One majorized step from γ_t = 0 with λ = 0 gives ζ_t = −∇_t; the
        // norm of the gradient is what the dead zone must cover.
        let mut theta = pilot.theta.clone();
        for v in theta.gamma[t].iter_mut() {
            *v = 0.0;
        }
        let (_, grad) = q1_gradient(&aug, &theta);
        let n = dataset.n_total() as f64;
        let r = theta.structure.group_range(t);
        let norm = grad[r].iter().map(|g| (g / n).powi(2)).sum::<f64>().sqrt();
        l2 = l2.max(norm);
    }
    Ok((l1.max(1e-6), l2.max(1e-6)))
}

/// Shape of a grid built from the data-driven maxima.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub n_lambda1: usize,
    pub n_lambda2: usize,
    /// Smallest grid value as a fraction of the maximum.
    pub min_ratio: f64,
    /// Anchor as a fraction of the maximum.
    pub anchor_ratio: f64,
}

impl Default for GridSettings {
    /// 8×8 log-spaced down to 5% of the maxima, anchored at 1%.
    fn default() -> Self {
        GridSettings {
            n_lambda1: 8,
            n_lambda2: 8,
            min_ratio: 0.05,
            anchor_ratio: 0.01,
        }
    }
}

/// Grid from a pilot fit at `λ1 = anchor_ratio · λ1_max`, `λ2 = 0`. Returns the
/// pilot too, so it can warm-start the anchor.
pub fn default_grid(
    dataset: &MultiStudyDataset,
    config: &FitConfig,
    settings: &GridSettings,
) -> Result<(TuningGrid, FitResult)> {
    let (x, y) = dataset.merged();
    let l1 = glm_lambda_max(&x, &y, dataset.family, &config.unpenalized_beta)?;
    let pilot_cfg = FitConfig {
        lambda1: settings.anchor_ratio * l1,
        lambda2: 0.0,
        ..config.clone()
    };
    let pilot = fit(dataset, &pilot_cfg)?;
    let (l1, l2) = lambda_max(dataset, config, &pilot)?;
    let grid = TuningGrid::log_spaced(
        l1,
        l2,
        settings.n_lambda1,
        settings.n_lambda2,
        settings.min_ratio,
        settings.anchor_ratio,
    )?;
    Ok((grid, pilot))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcqValue {
    pub icq: f64,
    pub q1: f64,
    pub q2: f64,
    pub dim: usize,
    /// `dim · log N`.
    pub complexity: f64,
}

/// `ICQ(λ) = 2{Q1(θ̂_λ | θ̂0) + Q2(θ̂0)} + dim(θ̂_λ) log N`, where `Q1`, `Q2` are
/// negative expected log-likelihoods evaluated on draws from the anchor's
/// posterior.
pub fn icq(fit: &FitResult, anchor_draws: &[DMatrix<f64>], dataset: &MultiStudyDataset) -> Result<IcqValue> {
    if anchor_draws.is_empty() {
        return Err(contract("ICQ needs the anchor fit's posterior draws"));
    }
    let aug = augment_design(dataset, anchor_draws, fit.theta.structure)?;
    let q1 = q1_value(&aug, &fit.theta);
    let q2 = q2_value(anchor_draws);
    let dim = model_dimension(&fit.theta, dataset.family);
    let complexity = dim as f64 * (dataset.n_total() as f64).ln();
    Ok(IcqValue {
        icq: 2.0 * (q1 + q2) + complexity,
        q1,
        q2,
        dim,
        complexity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcqRow {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `NaN` when the fit failed.
    pub icq: f64,
    pub dim: usize,
    pub s1_size: usize,
    pub s2_size: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcqTable {
    pub rows: Vec<IcqRow>,
    /// Row with the smallest ICQ among fits that completed.
    pub best: usize,
}

impl IcqTable {
    pub fn best_row(&self) -> &IcqRow {
        &self.rows[self.best]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["lambda1", "lambda2", "icq", "dim", "s1_size", "s2_size", "converged"])?;
        for r in &self.rows {
            out.write_record([
                format!("{:e}", r.lambda1),
                format!("{:e}", r.lambda2),
                format!("{}", r.icq),
                r.dim.to_string(),
                r.s1_size.to_string(),
                r.s2_size.to_string(),
                r.converged.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Run the `λ2` rows concurrently. Each row is still warm-started
    /// sequentially along `λ1`, so results do not depend on thread count.
    pub parallel: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { parallel: true }
    }
}

/// Result of a grid search: the selected fit, the anchor fit and the table.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: FitResult,
    pub anchor: FitResult,
    pub table: IcqTable,
}

/// Fits the anchor, then every grid point, scoring all of them with ICQ on
/// the anchor's draws. Each `λ2` row starts from the anchor solution and
/// walks up the `λ1` values, warm-starting from the next smaller one.
/// `anchor_start` optionally warm-starts the anchor fit.
pub fn grid_search(
    dataset: &MultiStudyDataset,
    grid: &TuningGrid,
    config: &FitConfig,
    options: &SearchOptions,
    anchor_start: Option<&FitResult>,
) -> Result<SearchResult> {
    if grid.is_empty() {
        return Err(contract("tuning grid is empty"));
    }
    let anchor_cfg = FitConfig {
        lambda1: grid.anchor.0,
        lambda2: grid.anchor.1,
        ..config.clone()
    };
    let anchor = fit_from(dataset, &anchor_cfg, anchor_start)?;
    let anchor_draws = &anchor.draws;

    let run_row = |l2: f64| -> Vec<(IcqRow, Option<FitResult>)> {
        let mut out: Vec<(IcqRow, Option<FitResult>)> = Vec::with_capacity(grid.lambda1.len());
        let mut warm: Option<FitResult> = Some(anchor.clone());
        for &l1 in grid.lambda1.iter().rev() {
            let cfg = FitConfig {
                lambda1: l1,
                lambda2: l2,
                ..config.clone()
            };
            let res = fit_from(dataset, &cfg, warm.as_ref())
                .and_then(|f| icq(&f, anchor_draws, dataset).map(|v| (f, v)));
            match res {
                Ok((f, v)) => {
                    let row = IcqRow {
                        lambda1: l1,
                        lambda2: l2,
                        icq: v.icq,
                        dim: v.dim,
                        s1_size: f.selected.s1.len(),
                        s2_size: f.selected.s2.len(),
                        converged: f.converged,
                        error: None,
                    };
                    warm = Some(f.clone());
                    out.push((row, Some(f)));
                }
                Err(e) => {
                    warn!("fit at lambda1={l1:e}, lambda2={l2:e} failed: {e}");
                    out.push((
                        IcqRow {
                            lambda1: l1,
                            lambda2: l2,
                            icq: f64::NAN,
                            dim: 0,
                            s1_size: 0,
                            s2_size: 0,
                            converged: false,
                            error: Some(e.to_string()),
                        },
                        None,
                    ));
                }
            }
        }
        out.reverse();
        out
    };

    let results: Vec<Vec<(IcqRow, Option<FitResult>)>> = if options.parallel {
        grid.lambda2.par_iter().map(|&l2| run_row(l2)).collect()
    } else {
        grid.lambda2.iter().map(|&l2| run_row(l2)).collect()
    };

    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, FitResult)> = None;
    for (row, fit) in results.into_iter().flatten() {
        if let Some(f) = fit {
            if best.as_ref().is_none_or(|(_, v, _)| row.icq < *v) {
                best = Some((rows.len(), row.icq, f));
            }
        }
        rows.push(row);
    }
    match best {
        Some((idx, _, fit)) => Ok(SearchResult {
            best: fit,
            anchor,
            table: IcqTable { rows, best: idx },
        }),
        None => Err(Error::AllFitsFailed(
            rows.iter()
                .map(|r| {
                    format!(
                        "({:e}, {:e}): {}",
                        r.lambda1,
                        r.lambda2,
                        r.error.as_deref().unwrap_or("unknown")
                    )
                })
                .collect(),
        )),
    }
}

/// Data-driven grid from a pilot fit, then [`grid_search`] with the anchor
/// warm-started from the pilot.
pub fn tune(
    dataset: &MultiStudyDataset,
    config: &FitConfig,
    settings: &GridSettings,
    options: &SearchOptions,
) -> Result<SearchResult> {
    let (grid, pilot) = default_grid(dataset, config, settings)?;
    grid_search(dataset, &grid, config, options, Some(&pilot))
}
