use pglmm::fit::{FitConfig, MStepOptions};
use pglmm::glm::fit_glm;
use pglmm::model::Family;
use pglmm::penalty::PenaltySpec;
use pglmm::sim::{
    fit_seed, gen_scenario, generate, holdout_eval, pe_med, replicate_table, run_strategy, study_sizes, HoldoutSettings,
    Mode, Scenario, Strategy, StrategySettings,
};
use pglmm::tuning::{GridSettings, SearchOptions};

fn cheap_settings(mode: Mode) -> StrategySettings {
    let mut fit = FitConfig {
        max_iter: 5,
        ..FitConfig::default()
    };
    fit.schedule.initial = 30;
    fit.schedule.max = 60;
    StrategySettings {
        mode,
        fit,
        grid: GridSettings {
            n_lambda1: 2,
            n_lambda2: 2,
            ..GridSettings::default()
        },
        search: SearchOptions { parallel: false },
        ..StrategySettings::default()
    }
}

#[test]
fn allocation_puts_a_third_in_the_first_study() {
    assert_eq!(study_sizes(90, 4).unwrap(), vec![30, 20, 20, 20]);
    assert_eq!(study_sizes(500, 5).unwrap(), vec![167, 84, 83, 83, 83]);
    assert_eq!(study_sizes(500, 10).unwrap().iter().sum::<usize>(), 500);
    let sc = Scenario {
        n: 500,
        k: 5,
        ..Scenario::default()
    };
    let sizes: Vec<usize> = gen_scenario(&sc, 0).unwrap().0.studies.iter().map(|s| s.n()).collect();
    assert_eq!(sizes, vec![167, 84, 83, 83, 83]);
}

#[test]
fn predictors_are_standard_normal() {
    let sc = Scenario {
        n: 20_000,
        k: 4,
        p: 3,
        ..Scenario::default()
    };
    let train = generate(&sc, 0).unwrap().train;
    let (x, _) = train.merged();
    let n = x.nrows() as f64;
    for j in 1..x.ncols() {
        let col = x.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt(), "column {j} mean {mean}");
        // Var of the sample variance of N(0,1) is 2/(n−1).
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "column {j} variance {var}");
        assert!(x.column(0).iter().all(|v| *v == 1.0));
    }
}

#[test]
fn random_effect_contribution_has_the_stated_variance() {
    let sigma2 = 2.0;
    let sc = Scenario {
        n: 200,
        k: 10,
        sigma2,
        beta: vec![0.0, 1.0, 1.0],
        p: 2,
        ..Scenario::default()
    };
    let (mut sum, mut sum_sq, mut count, mut z_sq) = (0.0, 0.0, 0.0, 0.0);
    for r in 0..400 {
        let rep = generate(&sc, r).unwrap();
        for (s, a) in rep.train.studies.iter().zip(&rep.alpha) {
            for i in 0..s.n() {
                let v: f64 = (0..s.p()).map(|j| s.x[(i, j)] * a[j]).sum();
                sum += v;
                sum_sq += v * v;
                count += 1.0;
                z_sq += (0..s.p()).map(|j| s.x[(i, j)].powi(2)).sum::<f64>();
            }
        }
    }
    let var = sum_sq / count - (sum / count).powi(2);
    let want = sigma2 * z_sq / count;
    assert!((var - want).abs() < 0.1 * want, "Var(z'α) {var} vs {want}");
}

#[test]
fn null_predictors_carry_no_study_effect() {
    let sc = Scenario {
        n: 100,
        k: 5,
        p: 6,
        beta: vec![0.0, 1.0, 1.0],
        sigma2: 2.0,
        mode: Mode::NonOracle,
        ..Scenario::default()
    };
    let rep = generate(&sc, 0).unwrap();
    for a in &rep.alpha {
        assert_eq!(a.len(), 7);
        assert!(a[3..].iter().all(|v| *v == 0.0));
        assert!(a[..3].iter().all(|v| *v != 0.0));
    }
}

#[test]
fn homogeneous_studies_share_one_conditional_law() {
    let sc = Scenario {
        n: 6000,
        k: 3,
        sigma2: 0.0,
        ..Scenario::default()
    };
    let rep = generate(&sc, 1).unwrap();
    assert!(rep.alpha.iter().flatten().all(|v| *v == 0.0));
    let fits: Vec<Vec<f64>> = rep
        .train
        .studies
        .iter()
        .map(|s| {
            fit_glm(&s.x, &s.y, Family::Bernoulli, &PenaltySpec::mcp(0.0), &[0], None, &MStepOptions::default())
                .unwrap()
                .beta
        })
        .collect();
    // Each slope has standard error below 0.06 at n ≥ 2000.
    for j in 0..3 {
        for f in &fits[1..] {
            assert!((f[j] - fits[0][j]).abs() < 4.0 * 2f64.sqrt() * 0.06, "{fits:?}");
        }
    }
}

#[test]
fn prediction_error_extremes() {
    assert_eq!(pe_med(&[1.0, 0.0, 1.0, 0.0], &[0.5; 4]), 0.5);
    assert_eq!(pe_med(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]), 0.0);
    assert_eq!(pe_med(&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]), 1.0);
}

fn small_scenario(mode: Mode, replications: usize) -> Scenario {
    Scenario {
        n: 120,
        k: 3,
        p: if mode == Mode::Oracle { 2 } else { 4 },
        beta: vec![0.0, 1.0, 1.0],
        validation_size: 60,
        replications,
        seed: 77,
        mode,
        ..Scenario::default()
    }
}

#[test]
fn single_replicate_table_equals_direct_runs() {
    for mode in [Mode::Oracle, Mode::NonOracle] {
        let sc = small_scenario(mode, 1);
        let settings = cheap_settings(mode);
        let table = replicate_table(std::slice::from_ref(&sc), &Strategy::ALL, &settings).unwrap();
        let row = &table.rows[0];
        assert!(row.failures.is_empty(), "{:?}", row.failures);
        let (train, validation) = gen_scenario(&sc, 0).unwrap();
        let mut cell = settings.clone();
        cell.fit.sampler.seed = fit_seed(sc.seed, 0);
        for (st, got) in Strategy::ALL.iter().zip(&row.runs[0]) {
            let want = run_strategy(*st, &train, &validation, &sc.full_beta(), &sc.model_columns(), &cell).unwrap();
            assert_eq!(got, &want);
            let summary = row.summary(*st).unwrap();
            assert_eq!((summary.pe_med, &summary.beta, summary.tp), (want.pe_med, &want.beta, want.tp));
            assert_eq!(want.tp.is_none(), mode == Mode::Oracle);
        }
    }
}

#[test]
fn same_seed_gives_identical_tables() {
    let sc = small_scenario(Mode::Oracle, 2);
    let settings = cheap_settings(Mode::Oracle);
    let a = replicate_table(std::slice::from_ref(&sc), &Strategy::ALL, &settings).unwrap();
    let b = replicate_table(std::slice::from_ref(&sc), &Strategy::ALL, &settings).unwrap();
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);

    let other = Scenario { seed: 78, ..sc };
    let c = replicate_table(&[other], &Strategy::ALL, &settings).unwrap();
    assert_ne!(a.rows[0].runs, c.rows[0].runs);
}

#[test]
fn holdout_splits_once_per_study() {
    let sc = Scenario {
        n: 120,
        k: 2,
        ..Scenario::default()
    };
    let (train, _) = gen_scenario(&sc, 0).unwrap();
    let mut fit = FitConfig {
        max_iter: 4,
        ..FitConfig::default()
    };
    fit.schedule.initial = 20;
    fit.schedule.max = 40;
    let settings = HoldoutSettings {
        fit,
        grid: None,
        search: SearchOptions { parallel: false },
        ..HoldoutSettings::default()
    };
    let out = holdout_eval(&train, &settings).unwrap();
    assert_eq!(out.len(), 2);
    for (r, s) in out.iter().zip(&train.studies) {
        assert_eq!(r.study, s.id);
        assert_eq!(r.pglmm.len(), s.n());
        assert!(r.pglm_per_study.iter().chain(&r.pglm_merged).all(|e| (0.0..=1.0).contains(e)));
    }
    let one = train.without_study(1).unwrap();
    assert!(holdout_eval(&one, &settings).is_err());
}
