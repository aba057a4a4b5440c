//! `pglmm`: fit, tune and evaluate penalized mixed models on multi-study data,
//! build TSP features and run simulation tables.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use pglmm::model::{CovStructure, Family};
use pglmm::penalty::PenaltyKind;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "pglmm", version, about = "Penalized GLMMs for multi-study variable selection")]
pub struct Cli {
    /// Worker threads; 1 gives the deterministic reference mode.
    #[arg(long, global = true, env = "PGLMM_THREADS")]
    pub threads: Option<usize>,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit at fixed (lambda1, lambda2).
    Fit(FitCmd),
    /// Choose (lambda1, lambda2) by ICQ over a grid.
    Tune(TuneCmd),
    /// Predict means for new rows with a saved fit.
    Predict(PredictCmd),
    /// Build top-scoring-pair indicator features from expression files.
    Tsp(TspCmd),
    /// Rank features by marginal likelihood, deduplicate and keep the top M.
    Screen(ScreenCmd),
    /// Run a simulation table from a scenario file.
    Simulate(SimulateCmd),
    /// Hold-one-study-out evaluation.
    Holdout(HoldoutCmd),
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Long-format CSV, one row per subject.
    #[arg(long, env = "PGLMM_DATA")]
    pub data: PathBuf,
    #[arg(long, default_value = "y", env = "PGLMM_RESPONSE")]
    pub response: String,
    #[arg(long, default_value = "study", env = "PGLMM_STUDY")]
    pub study: String,
    /// Comma-separated predictors; default is every other column.
    #[arg(long, env = "PGLMM_PREDICTORS")]
    pub predictors: Option<String>,
    /// Comma-separated predictors with a random effect (intercept always
    /// included); default is all.
    #[arg(long, env = "PGLMM_Z_COLUMNS")]
    pub z_columns: Option<String>,
    #[arg(long, default_value = "bernoulli", env = "PGLMM_FAMILY")]
    pub family: Family,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Penalty on fixed effects (mcp, scad, l1).
    #[arg(long, default_value = "mcp", env = "PGLMM_PENALTY")]
    pub penalty: PenaltyKind,
    /// Penalty on random-effect groups; defaults to --penalty.
    #[arg(long, env = "PGLMM_PENALTY2")]
    pub penalty2: Option<PenaltyKind>,
    /// Concavity parameter; defaults to 3 for MCP and 3.7 for SCAD.
    #[arg(long, env = "PGLMM_OMEGA")]
    pub omega: Option<f64>,
    /// Loading-matrix shape (full, diagonal); default full when q <= 10.
    #[arg(long, env = "PGLMM_STRUCTURE")]
    pub structure: Option<CovStructure>,
    /// Leave the random-intercept group unpenalized.
    #[arg(long, env = "PGLMM_FREE_INTERCEPT_GROUP")]
    pub free_intercept_group: bool,
    #[arg(long, default_value_t = 1, env = "PGLMM_SEED")]
    pub seed: u64,
    #[arg(long, env = "PGLMM_MAX_ITER")]
    pub max_iter: Option<usize>,
    #[arg(long, env = "PGLMM_TOL")]
    pub tol: Option<f64>,
    /// Posterior draws per study in the first iteration.
    #[arg(long, env = "PGLMM_DRAWS_INITIAL")]
    pub draws_initial: Option<usize>,
    /// Cap on posterior draws per study.
    #[arg(long, env = "PGLMM_DRAWS_MAX")]
    pub draws_max: Option<usize>,
    #[arg(long, env = "PGLMM_BURNIN")]
    pub burnin: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.0, env = "PGLMM_LAMBDA1")]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.0, env = "PGLMM_LAMBDA2")]
    pub lambda2: f64,
    /// Output directory.
    #[arg(long, env = "PGLMM_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Grid file: explicit `lambda1`/`lambda2` lists, or `n_lambda1`,
    /// `n_lambda2`, `min_ratio`, `anchor_ratio`. Default 8×8 data-driven.
    #[arg(long, env = "PGLMM_GRID")]
    pub grid: Option<PathBuf>,
    #[arg(long, env = "PGLMM_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictCmd {
    /// Fit document written by `fit` or `tune`.
    #[arg(long, env = "PGLMM_FIT")]
    pub fit: PathBuf,
    /// CSV containing every fitted predictor column.
    #[arg(long, env = "PGLMM_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "PGLMM_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("pair_source").required(true).args(["pairs", "enumerate"])))]
pub struct TspCmd {
    /// Expression CSVs (samples × genes), one per study.
    #[arg(long, num_args = 1.., required = true)]
    pub expr: Vec<PathBuf>,
    /// CSV with `sample`, `response` columns.
    #[arg(long, env = "PGLMM_LABELS")]
    pub labels: Option<PathBuf>,
    /// Pair list with `gene_a`, `gene_b` columns.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Use every pair of genes common to all studies.
    #[arg(long)]
    pub enumerate: bool,
    /// Only write the pair list, not the feature matrix.
    #[arg(long)]
    pub pairs_only: bool,
    #[arg(long, env = "PGLMM_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScreenCmd {
    /// Feature CSV as written by `tsp`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value = "response", env = "PGLMM_RESPONSE")]
    pub response: String,
    #[arg(long, default_value = "study", env = "PGLMM_STUDY")]
    pub study: String,
    /// Number of features to keep.
    #[arg(long, default_value_t = 50, env = "PGLMM_TOP")]
    pub top: usize,
    /// Pair list naming the genes of each feature; needed when gene ids
    /// contain underscores.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, env = "PGLMM_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    /// Scenario file (`key = value` lines).
    #[arg(long, env = "PGLMM_SCENARIO")]
    pub scenario: PathBuf,
    #[arg(long, env = "PGLMM_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HoldoutCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fixed lambda1; with --lambda2, skips tuning.
    #[arg(long, requires = "lambda2", env = "PGLMM_LAMBDA1")]
    pub lambda1: Option<f64>,
    #[arg(long, requires = "lambda1", env = "PGLMM_LAMBDA2")]
    pub lambda2: Option<f64>,
    /// Grid settings file used when tuning.
    #[arg(long, env = "PGLMM_GRID")]
    pub grid: Option<PathBuf>,
    #[arg(long, env = "PGLMM_OUT")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return if usage_error { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PGLMM_LOG", level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
