use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use pglmm::fit::{fit, FitConfig};
use pglmm::io::{
    load_dataset, load_expression, load_features, load_labels, load_pairs, pair_from_name, parse_column_list,
    parse_grid_file, parse_grid_settings, parse_simulation, read_design, write_features, write_holdout, write_pairs,
    write_predictions, write_scores, write_selected, DatasetSpec, FitDocument, GridFile, ScoreRow,
};
use pglmm::model::MultiStudyDataset;
use pglmm::sim::{holdout_eval, replicate_table, HoldoutSettings};
use pglmm::tsp::{common_genes, dedup_ranked, enumerate_pairs, screen_univariate, select_top, GenePair};
use pglmm::tuning::{grid_search, icq, tune, GridSettings, SearchOptions};

use crate::manifest::{now_unix, RunManifest};
use crate::{Command, DataArgs, FitCmd, HoldoutCmd, ModelArgs, PredictCmd, ScreenCmd, SimulateCmd, TspCmd, TuneCmd};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(c) => run_fit(c),
        Command::Tune(c) => run_tune(c),
        Command::Predict(c) => run_predict(c),
        Command::Tsp(c) => run_tsp(c),
        Command::Screen(c) => run_screen(c),
        Command::Simulate(c) => run_simulate(c),
        Command::Holdout(c) => run_holdout(c),
    }
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Parallel grid rows only when more than one worker is available.
fn search_options() -> SearchOptions {
    SearchOptions {
        parallel: rayon::current_num_threads() > 1,
    }
}

fn dataset(args: &DataArgs) -> Result<MultiStudyDataset> {
    let spec = DatasetSpec {
        response: args.response.clone(),
        study: args.study.clone(),
        family: args.family,
        predictors: parse_column_list(args.predictors.as_deref()),
        z_columns: parse_column_list(args.z_columns.as_deref()),
    };
    let ds = load_dataset(&args.data, &spec).with_context(|| format!("loading {}", args.data.display()))?;
    info!(
        "loaded {} studies, {} subjects, p = {}, q = {}",
        ds.k(),
        ds.n_total(),
        ds.p(),
        ds.q()
    );
    Ok(ds)
}

fn fit_config(model: &ModelArgs, lambda1: f64, lambda2: f64) -> FitConfig {
    let mut cfg = FitConfig {
        lambda1,
        lambda2,
        penalty1: model.penalty,
        penalty2: model.penalty2.unwrap_or(model.penalty),
        omega: model.omega.unwrap_or_else(|| model.penalty.default_omega()),
        structure: model.structure,
        ..FitConfig::default()
    };
    if model.free_intercept_group {
        cfg.unpenalized_groups = vec![0];
    }
    cfg.sampler.seed = model.seed;
    if let Some(v) = model.max_iter {
        cfg.max_iter = v;
    }
    if let Some(v) = model.tol {
        cfg.tol = v;
    }
    if let Some(v) = model.draws_initial {
        cfg.schedule.initial = v;
    }
    if let Some(v) = model.draws_max {
        cfg.schedule.max = v;
    }
    if let Some(v) = model.burnin {
        cfg.sampler.burnin = v;
    }
    cfg
}

fn report(doc: &FitDocument) {
    println!(
        "converged: {} after {} iterations",
        doc.diagnostics.converged, doc.diagnostics.iterations
    );
    println!("lambda1 = {}, lambda2 = {}", doc.lambda1, doc.lambda2);
    for (name, b) in doc.columns.iter().zip(&doc.theta.beta) {
        println!("  beta[{name}] = {b:.6}");
    }
    println!("selected fixed effects: {}", doc.selected.fixed.join(", "));
    println!("selected random effects: {}", doc.selected.random.join(", "));
    if let Some(v) = &doc.icq {
        println!("ICQ = {:.4} (dim {})", v.icq, v.dim);
    }
}

fn run_fit(c: FitCmd) -> Result<()> {
    let started = now_unix();
    let ds = dataset(&c.data)?;
    let cfg = fit_config(&c.model, c.lambda1, c.lambda2);
    let result = fit(&ds, &cfg)?;
    let value = icq(&result, &result.draws, &ds).ok();
    let doc = FitDocument::new(&result, &ds, &cfg, value)?;
    out_dir(&c.out)?;
    doc.save(&c.out.join("fit.json"))?;
    report(&doc);

    let mut m = RunManifest::new("fit", json!({ "data": &c.data, "fit": &cfg }), Some(cfg.sampler.seed), started);
    m.input(&c.data.data)?;
    m.output("fit.json");
    m.write(&c.out)
}

fn run_tune(c: TuneCmd) -> Result<()> {
    let started = now_unix();
    let ds = dataset(&c.data)?;
    let cfg = fit_config(&c.model, 0.0, 0.0);
    let opts = search_options();
    let grid_file = match &c.grid {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(parse_grid_file(&text, &p.display().to_string())?)
        }
        None => None,
    };
    let search = match &grid_file {
        Some(GridFile::Explicit(g)) => grid_search(&ds, g, &cfg, &opts, None)?,
        Some(GridFile::Settings(s)) => tune(&ds, &cfg, s, &opts)?,
        None => tune(&ds, &cfg, &GridSettings::default(), &opts)?,
    };
    let best_cfg = FitConfig {
        lambda1: search.best.lambda1,
        lambda2: search.best.lambda2,
        ..cfg.clone()
    };
    let value = icq(&search.best, &search.anchor.draws, &ds)?;
    let doc = FitDocument::new(&search.best, &ds, &best_cfg, Some(value))?;
    out_dir(&c.out)?;
    doc.save(&c.out.join("fit.json"))?;
    search.table.write_csv(create(&c.out, "icq.csv")?)?;
    report(&doc);
    let failed = search.table.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        println!("{failed} of {} grid points failed; see icq.csv", search.table.rows.len());
    }

    let grid_json = match &grid_file {
        Some(GridFile::Explicit(g)) => json!(g),
        Some(GridFile::Settings(s)) => json!(s),
        None => json!(GridSettings::default()),
    };
    let mut m = RunManifest::new(
        "tune",
        json!({ "data": &c.data, "fit": &cfg, "grid": grid_json, "search": opts }),
        Some(cfg.sampler.seed),
        started,
    );
    m.input(&c.data.data)?;
    if let Some(p) = &c.grid {
        m.input(p)?;
    }
    m.output("fit.json");
    m.output("icq.csv");
    m.write(&c.out)
}

fn run_predict(c: PredictCmd) -> Result<()> {
    let started = now_unix();
    let doc = FitDocument::load(&c.fit).with_context(|| format!("loading {}", c.fit.display()))?;
    let file = File::open(&c.data).with_context(|| format!("opening {}", c.data.display()))?;
    let x = read_design(std::io::BufReader::new(file), &c.data.display().to_string(), &doc.columns)?;
    let pred = doc.predict(&x)?;
    out_dir(&c.out)?;
    write_predictions(create(&c.out, "predictions.csv")?, &pred)?;
    println!("{} predictions written", pred.len());

    let mut m = RunManifest::new("predict", json!({ "fit": &c.fit, "data": &c.data }), None, started);
    m.input(&c.fit)?;
    m.input(&c.data)?;
    m.output("predictions.csv");
    m.write(&c.out)
}

fn run_tsp(c: TspCmd) -> Result<()> {
    let started = now_unix();
    let labels = c.labels.as_deref().map(load_labels).transpose()?;
    let studies = c
        .expr
        .iter()
        .map(|p| load_expression(p, labels.as_ref()).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let pairs = match &c.pairs {
        Some(p) => load_pairs(p)?,
        None => {
            let genes = common_genes(&studies);
            println!("{} genes common to all {} studies", genes.len(), studies.len());
            enumerate_pairs(&genes)?
        }
    };
    println!("{} candidate pairs", pairs.len());
    out_dir(&c.out)?;
    write_pairs(create(&c.out, "pairs.csv")?, &pairs)?;
    if !c.pairs_only {
        write_features(create(&c.out, "features.csv")?, &studies, &pairs)?;
    }

    let mut m = RunManifest::new(
        "tsp",
        json!({ "expr": &c.expr, "labels": &c.labels, "pairs": &c.pairs, "enumerate": c.enumerate }),
        None,
        started,
    );
    for p in &c.expr {
        m.input(p)?;
    }
    for p in c.labels.iter().chain(&c.pairs) {
        m.input(p)?;
    }
    m.output("pairs.csv");
    if !c.pairs_only {
        m.output("features.csv");
    }
    m.write(&c.out)
}

fn run_screen(c: ScreenCmd) -> Result<()> {
    let started = now_unix();
    if c.top == 0 {
        bail!("--top must be at least 1");
    }
    let table = load_features(&c.features, &c.response, &c.study)?;
    let known: HashMap<String, GenePair> = match &c.pairs {
        Some(p) => load_pairs(p)?.into_iter().map(|g| (g.name(), g)).collect(),
        None => HashMap::new(),
    };
    let pairs: Vec<GenePair> = table
        .names
        .iter()
        .map(|n| match known.get(n) {
            Some(g) => Ok(g.clone()),
            None => pair_from_name(n).map_err(anyhow::Error::from),
        })
        .collect::<Result<_>>()?;
    info!("screening {} features over {} studies", pairs.len(), table.studies.len());
    let scores = table
        .columns
        .par_iter()
        .map(|col| screen_univariate(col, &table.response, &table.study))
        .collect::<pglmm::Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .loglik
            .total_cmp(&scores[a].loglik)
            .then_with(|| table.names[a].cmp(&table.names[b]))
    });
    let ranked: Vec<GenePair> = order.iter().map(|&j| pairs[j].clone()).collect();
    let kept = dedup_ranked(&ranked);
    let selected = select_top(&kept, c.top)?;
    let index: HashMap<&GenePair, usize> = pairs.iter().enumerate().map(|(j, p)| (p, j)).collect();
    let kept_set: std::collections::HashSet<&GenePair> = kept.iter().collect();
    let selected_set: std::collections::HashSet<&GenePair> = selected.iter().collect();
    let rows: Vec<ScoreRow> = order
        .iter()
        .map(|&j| ScoreRow {
            name: table.names[j].clone(),
            score: scores[j].clone(),
            kept: kept_set.contains(&pairs[j]),
            selected: selected_set.contains(&pairs[j]),
        })
        .collect();
    let selected_idx: Vec<usize> = selected.iter().map(|p| index[p]).collect();

    out_dir(&c.out)?;
    write_scores(create(&c.out, "scores.csv")?, &rows)?;
    write_selected(create(&c.out, "selected.csv")?, &table, &selected_idx)?;
    println!(
        "{} features scored, {} gene-disjoint, {} selected",
        pairs.len(),
        kept.len(),
        selected.len()
    );

    let mut m = RunManifest::new(
        "screen",
        json!({ "features": &c.features, "response": &c.response, "study": &c.study, "top": c.top }),
        None,
        started,
    );
    m.input(&c.features)?;
    if let Some(p) = &c.pairs {
        m.input(p)?;
    }
    m.output("scores.csv");
    m.output("selected.csv");
    m.write(&c.out)
}

fn run_simulate(c: SimulateCmd) -> Result<()> {
    let started = now_unix();
    let text = fs::read_to_string(&c.scenario).with_context(|| format!("reading {}", c.scenario.display()))?;
    let mut plan = parse_simulation(&text, &c.scenario.display().to_string())?;
    if rayon::current_num_threads() == 1 {
        plan.settings.search.parallel = false;
    }
    let table = replicate_table(&plan.scenarios, &plan.strategies, &plan.settings)?;
    out_dir(&c.out)?;
    table.write_csv(create(&c.out, "table.csv")?)?;
    serde_json::to_writer_pretty(create(&c.out, "runs.json")?, &table)?;
    let failures: usize = table.rows.iter().map(|r| r.failures.len()).sum();
    println!("{} scenario rows written; {failures} failed cells", table.rows.len());

    let seed = plan.scenarios.first().map(|s| s.seed);
    let mut m = RunManifest::new(
        "simulate",
        json!({ "scenarios": &plan.scenarios, "strategies": &plan.strategies, "settings": &plan.settings }),
        seed,
        started,
    );
    m.input(&c.scenario)?;
    m.output("table.csv");
    m.output("runs.json");
    m.write(&c.out)
}

fn run_holdout(c: HoldoutCmd) -> Result<()> {
    let started = now_unix();
    let ds = dataset(&c.data)?;
    let (l1, l2) = (c.lambda1.unwrap_or(0.0), c.lambda2.unwrap_or(0.0));
    let grid = match (&c.lambda1, &c.grid) {
        (Some(_), _) => None,
        (None, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(parse_grid_settings(&text, &p.display().to_string())?)
        }
        (None, None) => Some(GridSettings::default()),
    };
    let settings = HoldoutSettings {
        fit: fit_config(&c.model, l1, l2),
        grid,
        search: search_options(),
        ..HoldoutSettings::default()
    };
    let results = holdout_eval(&ds, &settings)?;
    out_dir(&c.out)?;
    write_holdout(create(&c.out, "holdout.csv")?, &results)?;
    for r in &results {
        let (a, b, d) = r.medians();
        println!("{}: PE_med pGLMM {a:.4}, merged pGLM {b:.4}, per-study pGLM {d:.4}", r.study);
    }

    let mut m = RunManifest::new(
        "holdout",
        json!({ "data": &c.data, "settings": &settings }),
        Some(settings.fit.sampler.seed),
        started,
    );
    m.input(&c.data.data)?;
    if let Some(p) = &c.grid {
        m.input(p)?;
    }
    m.output("holdout.csv");
    m.write(&c.out)
}
