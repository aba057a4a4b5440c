//! E-step: per-study posterior draws and the Monte Carlo Q-function.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::model::{augment_design, MultiStudyDataset, Theta};
use crate::sampler::{run_chain, study_seed, SamplerConfig, SamplerDiagnostics};

use super::objective::{q1_per_draw, q2_value};

#[derive(Debug, Clone)]
pub struct EStepOutput {
    /// One `L × q` draw matrix per study, in dataset order.
    pub draws: Vec<DMatrix<f64>>,
    pub q1: f64,
    pub q2: f64,
    /// Monte Carlo standard error of `q1` (draw-to-draw spread over `√L`).
    pub q1_se: f64,
    pub diagnostics: Vec<SamplerDiagnostics>,
    /// Final chain states, for warm-starting the next E-step.
    pub last_states: Vec<Vec<f64>>,
}

/// Cold-started E-step at `theta` (EM iteration 0).
pub fn estep(dataset: &MultiStudyDataset, theta: &Theta, config: &SamplerConfig) -> Result<EStepOutput> {
    estep_with(dataset, theta, config, 0, None)
}

/// E-step at `theta` for EM iteration `iteration`, optionally warm-starting
/// every chain. Study `k` is sampled with the sub-seed derived from the base
/// seed, its id and the iteration, so the output does not depend on how the
/// studies are scheduled.
pub fn estep_with(
    dataset: &MultiStudyDataset,
    theta: &Theta,
    config: &SamplerConfig,
    iteration: u64,
    starts: Option<&[Vec<f64>]>,
) -> Result<EStepOutput> {
    if let Some(s) = starts {
        if s.len() != dataset.k() {
            return Err(contract(format!(
                "{} warm-start states for {} studies",
                s.len(),
                dataset.k()
            )));
        }
    }
    let family = dataset.family;
    let chains = dataset
        .studies
        .par_iter()
        .enumerate()
        .map(|(k, study)| {
            let cfg = SamplerConfig {
                seed: study_seed(config.seed, &study.id, iteration),
                ..*config
            };
            run_chain(study, family, theta, &cfg, starts.map(|s| s[k].as_slice()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut draws = Vec::with_capacity(chains.len());
    let mut diagnostics = Vec::with_capacity(chains.len());
    let mut last_states = Vec::with_capacity(chains.len());
    for c in chains {
        draws.push(c.draws);
        diagnostics.push(c.diagnostics);
        last_states.push(c.last_state);
    }
    let aug = augment_design(dataset, &draws, theta.structure)?;
    let per = q1_per_draw(&aug, theta);
    let l = per.len() as f64;
    let q1 = per.iter().sum::<f64>() / l;
    let q1_se = if per.len() > 1 {
        (per.iter().map(|v| (v - q1).powi(2)).sum::<f64>() / (l - 1.0) / l).sqrt()
    } else {
        0.0
    };
    let q2 = q2_value(&draws);
    Ok(EStepOutput {
        draws,
        q1,
        q2,
        q1_se,
        diagnostics,
        last_states,
    })
}
