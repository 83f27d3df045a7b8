//! Scratch numeric pilots, not part of the suite. Run selectively:
//! `cargo test -p fairlend --test probe -- --ignored <name> --nocapture`

use fairlend::cox::{concordance, fit, ColumnDef, CoxConfig, FittedHazardModel, ModelColumn, SymMatrix};
use fairlend::data::{encode_survival, CovariateLayout, Gender, GenderPair, SurvivalSample};
use fairlend::di::{
    bootstrap_gap, gap_profile, nonparametric_gap, regression_gap, returns_for_regression,
    sensitivity_sweep, BinGrid, GapRegression, ReturnObservation,
};
use fairlend::diagnostics::{cox_snell, schoenfeld_drift};
use fairlend::stream::{stream, Domain};
use fairlend::synthetic::{
    drifting_market, generate, hazard_market, null_market, threshold_market, FundingRule,
    HazardEffect, MarketSpec, RateGrid, RepaymentMode,
};

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Candidate acceptance market for coefficient recovery: flat baseline, all
/// effects sized to avoid hazard clamping, everything funded and observed.
fn recovery_market(n: usize) -> MarketSpec {
    MarketSpec {
        label: "recovery".into(),
        n,
        male_share: 0.5,
        married_share: GenderPair::uniform(0.55),
        provinces: 8,
        censor_fraction: 0.0,
        rates: RateGrid::geometric(0.16, 0.02, 11, GenderPair::uniform(0.95)),
        repayment: RepaymentMode::Hazard {
            baseline: vec![0.015; 12],
            effects: vec![
                HazardEffect::fixed("male", 0.408, 0.0),
                HazardEffect::fixed("married", -0.239, 0.0),
                HazardEffect::fixed("age", 0.008, 37.0),
                HazardEffect::fixed("amount", 0.012, 5.0),
                HazardEffect::fixed("past_ontime", -0.08, 3.0),
            ],
        },
        funding: FundingRule::FundAll,
    }
}

fn recovery_config() -> CoxConfig {
    CoxConfig {
        covariates: Some(vec![
            "male".into(),
            "married".into(),
            "age".into(),
            "amount".into(),
            "past_ontime".into(),
        ]),
        spline_df: [
            ("age".to_string(), 0),
            ("amount".to_string(), 0),
            ("past_ontime".to_string(), 0),
        ]
        .into_iter()
        .collect(),
        time_interactions: vec![],
        ..CoxConfig::default()
    }
}

#[test]
#[ignore]
fn probe_recovery() {
    let spec = recovery_market(50_000);
    let truth_effects: &[(&str, f64, f64)] = &[
        ("male", 0.408, 0.0),
        ("married", -0.239, 0.0),
        ("age", 0.008, 37.0),
        ("amount", 0.012, 5.0),
        ("past_ontime", -0.08, 3.0),
    ];
    for seed in 1..=5u64 {
        let (records, _) = generate(&spec, seed).unwrap();
        let layout = CovariateLayout::from_records(&records).unwrap();
        let samples = encode_survival(&records, &layout).unwrap();
        let model = fit(&samples, &layout, &recovery_config()).unwrap();
        println!("== seed {seed}: events {} ==", model.n_events);
        let tol = 1.05f64.ln();
        for (name, beta, _) in truth_effects {
            let idx = model.columns.iter().position(|c| c.name == *name).unwrap();
            let err = model.beta_main[idx] - beta;
            println!(
                "  {name:12} est {:+.4} truth {beta:+.4} err {err:+.4}  ({:.0}% of tol)",
                model.beta_main[idx],
                100.0 * err.abs() / tol
            );
        }
        // Baseline: model reference cell is binaries at zero, linear terms at
        // their fitted centers.
        let mut log_corr = 0.0;
        for (name, beta, gen_center) in truth_effects {
            let idx = model.columns.iter().position(|c| c.name == *name).unwrap();
            match model.columns[idx].def {
                ColumnDef::Linear { center, .. } => log_corr += beta * (center - gen_center),
                ColumnDef::Raw { .. } => assert_eq!(*gen_center, 0.0),
                _ => panic!("unexpected spline"),
            }
        }
        let mut events_by_month = [0usize; 12];
        for s in &samples {
            if !s.censored && (s.time as usize) < 12 {
                events_by_month[s.time as usize] += 1;
            }
        }
        let mut worst: f64 = 0.0;
        for t in 0..12 {
            let truth_b = 0.015 * log_corr.exp();
            let rel = model.baseline[t] / truth_b - 1.0;
            if events_by_month[t] >= 50 {
                worst = worst.max(rel.abs());
            }
            println!(
                "  month {t:2}: baseline {:.5} truth {:.5} rel {:+.3} events {}",
                model.baseline[t], truth_b, rel, events_by_month[t]
            );
        }
        println!("  worst baseline rel err {worst:.3}");
    }
}

/// Analytic population DI of `threshold_market`, mirroring `gap_profile`
/// pooling on the population cell masses.
fn analytic_di(spec: &MarketSpec, grid: &BinGrid) -> f64 {
    let (twelfths, funding, rates, male_share) = match (&spec.repayment, &spec.funding) {
        (
            RepaymentMode::DiscreteTwelfths { female, male },
            FundingRule::Posterior {
                prior_mean,
                prior_sd,
                signal_sd,
                required_return,
                ..
            },
        ) => (
            GenderPair::new(female.clone(), male.clone()),
            (prior_mean, prior_sd, signal_sd, required_return),
            &spec.rates,
            spec.male_share,
        ),
        _ => panic!("not a threshold market"),
    };
    let (prior_mean, prior_sd, signal_sd, required_return) = funding;
    let k = grid.count();
    // Per bin per gender: [mass, funded mass].
    let mut fem = vec![[0.0f64; 2]; k];
    let mut mal = vec![[0.0f64; 2]; k];
    for g in [Gender::Female, Gender::Male] {
        let share = match g {
            Gender::Female => 1.0 - male_share,
            Gender::Male => male_share,
        };
        let weights = twelfths.get(g);
        let wsum: f64 = weights.iter().sum();
        let s0 = prior_sd.value(g);
        let s1 = signal_sd.value(g);
        let gamma = s0 * s0 / (s0 * s0 + s1 * s1);
        let mu = prior_mean.value(g);
        let pi = required_return.value(g);
        for (kk, w) in weights.iter().enumerate() {
            let lambda = kk as f64 / 12.0;
            for (j, r) in rates.values.iter().enumerate() {
                let mass = share * (w / wsum) * rates.weights.get(g)[j];
                let y = lambda * (1.0 + r);
                let Some(b) = grid.index(y) else { continue };
                let p = normal_cdf(((1.0 - gamma) * mu + gamma * lambda - pi / (1.0 + r)) / (gamma * s1));
                let cell = match g {
                    Gender::Female => &mut fem[b],
                    Gender::Male => &mut mal[b],
                };
                cell[0] += mass;
                cell[1] += mass * p;
            }
        }
    }
    let mut used = 0.0;
    let mut agg = 0.0;
    for b in 0..k {
        if fem[b][0] <= 0.0 || mal[b][0] <= 0.0 {
            continue;
        }
        let w = fem[b][0] + mal[b][0];
        used += w;
        agg += w * (fem[b][1] / fem[b][0] - mal[b][1] / mal[b][0]);
    }
    agg / used
}

#[test]
#[ignore]
fn probe_di7() {
    let spec = threshold_market(100_000);
    let grid = BinGrid::default();
    let truth = analytic_di(&spec, &grid);
    println!("analytic population DI {truth:+.5}");

    let male_only = CoxConfig {
        covariates: Some(vec!["male".into()]),
        ..CoxConfig::default()
    };
    let male_rate = CoxConfig {
        covariates: Some(vec!["male".into(), "rate".into()]),
        ..CoxConfig::default()
    };
    let male_rate_t = CoxConfig {
        covariates: Some(vec!["male".into(), "rate".into()]),
        time_interactions: vec!["male".into(), "rate".into()],
        ..CoxConfig::default()
    };
    for (label, config) in [
        ("male-only ", &male_only),
        ("male+rate ", &male_rate),
        ("male+rate*t", &male_rate_t),
    ] {
        for world in 0..4u64 {
            let seed = 100 + world;
            let t0 = std::time::Instant::now();
            let (records, gtruth) = generate(&spec, seed).unwrap();
            let layout = CovariateLayout::from_records(&records).unwrap();
            let funded: Vec<_> = records.iter().filter(|r| r.funded).cloned().collect();
            let samples = encode_survival(&funded, &layout).unwrap();
            let model = fit(&samples, &layout, config).unwrap();
            let mut rng = stream(seed, Domain::Impute, 0);
            let prof = nonparametric_gap(&records, &model, &layout, &grid, 1.0, &mut rng).unwrap();
            // Truth-based empirical check of the oracle.
            let obs: Vec<ReturnObservation> = gtruth
                .rows
                .iter()
                .zip(&records)
                .map(|(t, r)| ReturnObservation {
                    gender: r.gender,
                    y: t.lambda * (1.0 + r.rate),
                    funded: r.funded,
                })
                .collect();
            let emp = gap_profile(&obs, &grid).unwrap();
            let boot =
                bootstrap_gap(&records, &layout, config, &grid, 1.0, seed, 40, 0.05).unwrap();
            println!(
                "{label} world {world}: est {:+.5} empirical-truth {:+.5} CI [{:+.5},{:+.5}] covers {} failed {}  ({:?})",
                prof.aggregate,
                emp.aggregate,
                boot.lower,
                boot.upper,
                boot.lower <= truth && truth <= boot.upper,
                boot.failed,
                t0.elapsed()
            );
        }
    }
}

#[test]
#[ignore]
fn probe_decompose8() {
    let spec = threshold_market(100_000);
    let male_only = CoxConfig {
        covariates: Some(vec!["male".into()]),
        ..CoxConfig::default()
    };
    for seed in [7u64, 8, 9] {
        let (records, _) = generate(&spec, seed).unwrap();
        let layout = CovariateLayout::from_records(&records).unwrap();
        let funded: Vec<_> = records.iter().filter(|r| r.funded).cloned().collect();
        let samples = encode_survival(&funded, &layout).unwrap();
        let model = fit(&samples, &layout, &male_only).unwrap();
        let mut rng = stream(seed, Domain::Impute, 0);
        let kinds = [
            GapRegression::Plain,
            GapRegression::WithControls,
            GapRegression::Treatment,
        ];
        let mut line = format!("seed {seed}:");
        for kind in kinds {
            let ys =
                returns_for_regression(&records, &model, &layout, kind, 1.0, &mut rng).unwrap();
            let fitted = regression_gap(&records, &layout, &ys, kind).unwrap();
            line += &format!("  {:?} {:+.5} (se {:.5})", kind, fitted.gap, fitted.se);
        }
        println!("{line}");
    }
}

#[test]
#[ignore]
fn probe_sensitivity10() {
    let spec = threshold_market(100_000);
    let male_only = CoxConfig {
        covariates: Some(vec!["male".into()]),
        ..CoxConfig::default()
    };
    let grid = BinGrid::default();
    let mults = [1.0, 1.5, 2.0, 2.5, 3.0];
    for seed in [21u64, 22] {
        let (records, _) = generate(&spec, seed).unwrap();
        let layout = CovariateLayout::from_records(&records).unwrap();
        let funded: Vec<_> = records.iter().filter(|r| r.funded).cloned().collect();
        let samples = encode_survival(&funded, &layout).unwrap();
        let model = fit(&samples, &layout, &male_only).unwrap();
        let sweep =
            sensitivity_sweep(&records, &model, &layout, &grid, &mults, 4, seed).unwrap();
        let gaps: Vec<f64> = sweep.points.iter().map(|p| p.gap).collect();
        // Linear fit of |gap| on multiplier.
        let n = mults.len() as f64;
        let mx = mults.iter().sum::<f64>() / n;
        let my = gaps.iter().map(|g| g.abs()).sum::<f64>() / n;
        let sxy: f64 = mults.iter().zip(&gaps).map(|(x, g)| (x - mx) * (g.abs() - my)).sum();
        let sxx: f64 = mults.iter().map(|x| (x - mx) * (x - mx)).sum();
        let ssr: f64 = mults
            .iter()
            .zip(&gaps)
            .map(|(x, g)| {
                let pred = my + sxy / sxx * (x - mx);
                (g.abs() - pred) * (g.abs() - pred)
            })
            .sum();
        let sst: f64 = gaps.iter().map(|g| (g.abs() - my) * (g.abs() - my)).sum();
        let monotone = gaps.windows(2).all(|w| w[1].abs() < w[0].abs());
        println!(
            "seed {seed}: gaps {:?} monotone {monotone} r2 {:.4}",
            gaps.iter().map(|g| format!("{g:+.5}")).collect::<Vec<_>>(),
            1.0 - ssr / sst
        );
    }
}

#[test]
#[ignore]
fn probe_diag4() {
    // Size under a PH-true generator.
    let spec = hazard_market(2000);
    let config = CoxConfig {
        covariates: Some(vec![
            "male".into(),
            "married".into(),
            "age".into(),
            "amount".into(),
            "rate".into(),
            "past_failed".into(),
        ]),
        spline_df: [
            ("age".to_string(), 0),
            ("amount".to_string(), 0),
            ("rate".to_string(), 0),
            ("past_failed".to_string(), 0),
        ]
        .into_iter()
        .collect(),
        time_interactions: vec![],
        ..CoxConfig::default()
    };
    let t0 = std::time::Instant::now();
    let mut rejections = 0usize;
    let mut fails = 0usize;
    for seed in 0..200u64 {
        let (records, _) = generate(&spec, 1000 + seed).unwrap();
        let layout = CovariateLayout::from_records(&records).unwrap();
        let samples = encode_survival(&records, &layout).unwrap();
        let model = match fit(&samples, &layout, &config) {
            Ok(m) => m,
            Err(_) => {
                fails += 1;
                continue;
            }
        };
        let report = schoenfeld_drift(&model, &samples).unwrap();
        if report.global.p_value < 0.05 {
            rejections += 1;
        }
    }
    println!(
        "size: {rejections}/200 rejections, {fails} fit failures ({:?})",
        t0.elapsed()
    );

    // Power under a drifting male effect.
    let spec = drifting_market(2000, 2.5);
    let mut hits = 0usize;
    for seed in 0..100u64 {
        let (records, _) = generate(&spec, 2000 + seed).unwrap();
        let layout = CovariateLayout::from_records(&records).unwrap();
        let samples = encode_survival(&records, &layout).unwrap();
        let model = fit(&samples, &layout, &config).unwrap();
        let report = schoenfeld_drift(&model, &samples).unwrap();
        if report.global.p_value < 0.05 {
            hits += 1;
        }
    }
    println!("power: {hits}/100");

    // Cox-Snell calibration at n = 10k.
    for seed in [31u64, 32, 33] {
        let (records, _) = generate(&hazard_market(10_000), seed).unwrap();
        let layout = CovariateLayout::from_records(&records).unwrap();
        let samples = encode_survival(&records, &layout).unwrap();
        let model = fit(&samples, &layout, &config).unwrap();
        let report = cox_snell(&model, &samples).unwrap();
        println!("cox-snell seed {seed}: max deviation {:.4}", report.max_deviation);
    }
}

#[test]
#[ignore]
fn probe_concordance5() {
    // Hand case: expect 7/10 concordant pairs.
    let model = FittedHazardModel {
        version: fairlend::cox::MODEL_VERSION,
        raw_names: vec!["x".into()],
        columns: vec![ModelColumn {
            name: "x".into(),
            def: ColumnDef::Linear { source: 0, center: 0.0 },
        }],
        splines: vec![],
        interaction_columns: vec![],
        time_spec: None,
        beta_main: vec![1.0],
        beta_time: vec![],
        baseline: vec![1e-6; 12],
        naive_covariance: SymMatrix { dim: 1, data: vec![0.0] },
        robust_covariance: SymMatrix { dim: 1, data: vec![0.0] },
        loglik: 0.0,
        iteration_loglik: vec![],
        n_samples: 5,
        n_events: 5,
        concordance: 0.0,
        dropped_columns: vec![],
    };
    let xs = [4.0, 5.0, 1.0, 3.0, 2.0];
    let samples: Vec<SurvivalSample> = xs
        .iter()
        .enumerate()
        .map(|(t, &x)| SurvivalSample {
            covariates: vec![x],
            time: t as u8,
            censored: false,
            gender: Gender::Female,
        })
        .collect();
    let c = concordance(&model, &samples).unwrap();
    println!("hand case concordance {c} (want 0.7)");

    // Uninformative fit evaluated out of sample: repayment independent of
    // every covariate, and no funding selection that could induce one.
    let mut spec = null_market(10_000);
    spec.funding = FundingRule::FundAll;
    for base in [51u64, 61, 71, 81] {
        let (train, _) = generate(&spec, base).unwrap();
        let (eval, _) = generate(&spec, base + 1).unwrap();
        let layout = CovariateLayout::from_records(&train).unwrap();
        let tr: Vec<_> = train.iter().filter(|r| r.funded).cloned().collect();
        let model = fit(
            &encode_survival(&tr, &layout).unwrap(),
            &layout,
            &CoxConfig::default(),
        )
        .unwrap();
        let ev: Vec<_> = eval.iter().filter(|r| r.funded).cloned().collect();
        let c = concordance(&model, &encode_survival(&ev, &layout).unwrap()).unwrap();
        println!("uninformative out-of-sample concordance seeds {base}/{}: {c:.4}", base + 1);
    }
}

#[test]
#[ignore]
fn probe_bias9() {
    use fairlend::di::impute_returns;
    use fairlend::synthetic::bias_oracle;
    let mut spec = threshold_market(60_000);
    spec.censor_fraction = 0.0;
    for seed in [29u64, 30, 31, 32, 33, 34] {
        let (records, truth) = generate(&spec, seed).unwrap();
        let layout = CovariateLayout::from_records(&records).unwrap();
        let funded: Vec<_> = records.iter().filter(|r| r.funded).cloned().collect();
        let samples = encode_survival(&funded, &layout).unwrap();
        let config = CoxConfig {
            covariates: Some(vec!["male".into()]),
            ..CoxConfig::default()
        };
        let model = fit(&samples, &layout, &config).unwrap();
        let mut rng_a = stream(seed, Domain::Impute, 0);
        let mut rng_b = stream(seed, Domain::Impute, 1);
        let pass_a = impute_returns(&records, &model, &layout, 2.0, &mut rng_a).unwrap();
        let pass_b = impute_returns(&records, &model, &layout, 2.0, &mut rng_b).unwrap();
        let report = bias_oracle(&truth, &pass_a, &pass_b, &BinGrid::default()).unwrap();
        println!(
            "seed {seed}: agreement {:.4} over {} cells",
            report.agreement,
            report.cells.len()
        );
    }
}

#[test]
#[ignore]
fn probe_bootfail() {
    use rand::Rng;
    let spec = threshold_market(100_000);
    let (records, _) = generate(&spec, 100).unwrap();
    let layout = CovariateLayout::from_records(&records).unwrap();
    let config = CoxConfig {
        covariates: Some(vec!["male".into()]),
        ..CoxConfig::default()
    };
    let grid = BinGrid::default();
    for r in 0..40u64 {
        let mut rng = stream(100, Domain::Bootstrap, r);
        let resampled: Vec<_> = (0..records.len())
            .map(|_| records[rng.gen_range(0..records.len())].clone())
            .collect();
        let funded: Vec<_> = resampled.iter().filter(|x| x.funded).cloned().collect();
        let samples = encode_survival(&funded, &layout).unwrap();
        match fit(&samples, &layout, &config) {
            Ok(m) => {
                if let Err(e) =
                    fairlend::di::nonparametric_gap(&resampled, &m, &layout, &grid, 1.0, &mut rng)
                {
                    println!("rep {r}: profile error {e}");
                }
            }
            Err(e) => println!("rep {r}: fit error {e}"),
        }
    }
    println!("scan done");
}

#[test]
#[ignore]
fn probe_decompose8_variants() {
    use fairlend::synthetic::decomposition_market;
    let male_only = CoxConfig {
        covariates: Some(vec!["male".into(), "married".into()]),
        ..CoxConfig::default()
    };
    let variants: Vec<(String, MarketSpec)> = vec![
        ("decomposition/s7".into(), decomposition_market(100_000)),
        ("decomposition/s8".into(), decomposition_market(100_000)),
    ];
    for (i, (label, spec)) in variants.iter().enumerate() {
        let (records, truth) = generate(spec, 7 + i as u64).unwrap();
        for married in [0.0, 1.0] {
            let mut cell = String::new();
            for g in [Gender::Female, Gender::Male] {
                let all: Vec<bool> = records
                    .iter()
                    .filter(|r| r.gender == g && r.field("married") == Some(married))
                    .map(|r| r.funded)
                    .collect();
                let full: Vec<bool> = records
                    .iter()
                    .zip(&truth.rows)
                    .filter(|(r, t)| {
                        r.gender == g && r.field("married") == Some(married) && t.lambda == 1.0
                    })
                    .map(|(r, _)| r.funded)
                    .collect();
                let rate = |v: &[bool]| v.iter().filter(|b| **b).count() as f64 / v.len() as f64;
                cell += &format!(
                    "  {g:?}: all {:.4} (n {}) full {:.4}",
                    rate(&all),
                    all.len(),
                    rate(&full)
                );
            }
            println!("married={married}: {cell}");
        }
        let layout = CovariateLayout::from_records(&records).unwrap();
        let funded: Vec<_> = records.iter().filter(|r| r.funded).cloned().collect();
        let frate_f = records
            .iter()
            .filter(|r| r.gender == Gender::Female)
            .map(|r| f64::from(u8::from(r.funded)))
            .sum::<f64>()
            / records.iter().filter(|r| r.gender == Gender::Female).count() as f64;
        let frate_m = records
            .iter()
            .filter(|r| r.gender == Gender::Male)
            .map(|r| f64::from(u8::from(r.funded)))
            .sum::<f64>()
            / records.iter().filter(|r| r.gender == Gender::Male).count() as f64;
        let samples = encode_survival(&funded, &layout).unwrap();
        let model = fit(&samples, &layout, &male_only).unwrap();
        let mut rng = stream(7 + i as u64, Domain::Impute, 0);
        let mut line = format!("{label}: funded f {frate_f:.3} m {frate_m:.3}");
        for kind in [
            GapRegression::Plain,
            GapRegression::WithControls,
            GapRegression::Treatment,
        ] {
            let ys =
                returns_for_regression(&records, &model, &layout, kind, 1.0, &mut rng).unwrap();
            let fitted = regression_gap(&records, &layout, &ys, kind).unwrap();
            line += &format!("  {:?} {:+.5}", kind, fitted.gap);
            let ys_true: Vec<f64> = truth.rows.iter().map(|t| t.true_return).collect();
            let oracle = regression_gap(&records, &layout, &ys_true, kind).unwrap();
            line += &format!(" (true-Y {:+.5})", oracle.gap);
        }
        println!("{line}");
    }
}
