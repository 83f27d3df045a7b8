//! End-to-end tests of the `fairlend` binary: pipeline completion,
//! determinism, config/flag precedence, and structured failures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fairlend"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn fairlend");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> serde_json::Value {
    let out = bin().args(args).output().expect("spawn fairlend");
    assert!(!out.status.success(), "command {args:?} unexpectedly passed");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr not JSON ({e}): {stderr}"))
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

/// Simulate a small null market and fit it, returning the artifact paths.
fn fixture(dir: &Path, n: u32, seed: u64) -> (PathBuf, PathBuf) {
    let loans = dir.join("loans.csv");
    let model = dir.join("model.json");
    run_ok(&[
        "simulate",
        "--preset",
        "null",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out-loans",
        loans.to_str().unwrap(),
        "--out-truth",
        dir.join("truth.csv").to_str().unwrap(),
    ]);
    run_ok(&[
        "fit",
        "--input",
        loans.to_str().unwrap(),
        "--output",
        model.to_str().unwrap(),
    ]);
    (loans, model)
}

#[test]
fn null_pipeline_completes_and_ci_covers_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (loans, model) = fixture(dir.path(), 3000, 11);
    let out_dir = dir.path().join("di");
    run_ok(&[
        "estimate-di",
        "--input",
        loans.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--seed",
        "5",
        "--bootstrap",
        "12",
    ]);
    let report = read_json(&out_dir.join("di_report.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["command"], "estimate-di");
    let boot = &report["bootstrap"];
    let (lower, upper) = (boot["lower"].as_f64().unwrap(), boot["upper"].as_f64().unwrap());
    assert!(
        lower <= 0.0 && 0.0 <= upper,
        "null-market CI [{lower}, {upper}] misses zero"
    );
    // Plot data exists with the documented header.
    let profile = std::fs::read_to_string(out_dir.join("di_profile.csv")).unwrap();
    assert!(profile.starts_with("lower,upper,female_rate,male_rate,gap,weight,female_n,male_n\n"));
}

#[test]
fn same_seed_reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (loans, model) = fixture(dir.path(), 2000, 3);
    let mut bytes = Vec::new();
    for (threads, sub) in [("1", "a"), ("3", "b")] {
        let out_dir = dir.path().join(sub);
        run_ok(&[
            "estimate-di",
            "--threads",
            threads,
            "--input",
            loans.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--seed",
            "9",
            "--bootstrap",
            "6",
        ]);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        bytes.push(
            files
                .iter()
                .map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(bytes[0], bytes[1], "artifacts differ across --threads");

    // Simulation is deterministic too.
    for sub in ["s1", "s2"] {
        let d = dir.path().join(sub);
        std::fs::create_dir_all(&d).unwrap();
        run_ok(&[
            "simulate",
            "--preset",
            "hazard",
            "--n",
            "1500",
            "--seed",
            "21",
            "--out-loans",
            d.join("l.csv").to_str().unwrap(),
            "--out-truth",
            d.join("t.csv").to_str().unwrap(),
        ]);
    }
    assert_eq!(
        std::fs::read(dir.path().join("s1/l.csv")).unwrap(),
        std::fs::read(dir.path().join("s2/l.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("s1/t.csv")).unwrap(),
        std::fs::read(dir.path().join("s2/t.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let (loans, model) = fixture(dir.path(), 2000, 7);
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "seed = 40\n[estimate]\nbootstrap = 3\nmultiplier = 1.5\n",
    )
    .unwrap();

    // Config alone: seed 40, bootstrap 3, multiplier 1.5.
    let out_a = dir.path().join("a");
    run_ok(&[
        "estimate-di",
        "--config",
        config.to_str().unwrap(),
        "--input",
        loans.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out-dir",
        out_a.to_str().unwrap(),
    ]);
    let report = read_json(&out_a.join("di_report.json"));
    assert_eq!(report["seed"], 40);
    assert_eq!(report["multiplier"], 1.5);
    assert_eq!(report["bootstrap"]["replicates"], 3);

    // Flags win over the same config.
    let out_b = dir.path().join("b");
    run_ok(&[
        "estimate-di",
        "--config",
        config.to_str().unwrap(),
        "--input",
        loans.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out-dir",
        out_b.to_str().unwrap(),
        "--seed",
        "41",
        "--bootstrap",
        "2",
        "--multiplier",
        "1",
    ]);
    let report = read_json(&out_b.join("di_report.json"));
    assert_eq!(report["seed"], 41);
    assert_eq!(report["multiplier"], 1.0);
    assert_eq!(report["bootstrap"]["replicates"], 2);
}

#[test]
fn failures_are_structured_and_validated_before_compute() {
    let dir = tempfile::tempdir().unwrap();

    // Stochastic subcommand without a seed.
    let (loans, _) = fixture(dir.path(), 1200, 2);
    let err = run_err(&[
        "estimate-di",
        "--input",
        loans.to_str().unwrap(),
        "--out-dir",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("--seed"));

    // Missing input file is caught during validation.
    let err = run_err(&[
        "fit",
        "--input",
        dir.path().join("absent.csv").to_str().unwrap(),
        "--output",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(err["error"]["kind"], "config");

    // Malformed CSV names the row and column.
    let bad = dir.path().join("bad.csv");
    let mut text = std::fs::read_to_string(&loans).unwrap();
    text = text.replacen(",f,", ",x,", 1);
    std::fs::write(&bad, text).unwrap();
    let err = run_err(&[
        "fit",
        "--input",
        bad.to_str().unwrap(),
        "--output",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(err["error"]["kind"], "csv");
    let message = err["error"]["message"].as_str().unwrap();
    assert!(message.contains("row") && message.contains("gender"), "{message}");

    // Bad config key fails loudly.
    let config = dir.path().join("typo.toml");
    std::fs::write(&config, "boostrap = 3\n").unwrap();
    let err = run_err(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--preset",
        "null",
        "--seed",
        "1",
        "--out-loans",
        dir.path().join("l.csv").to_str().unwrap(),
        "--out-truth",
        dir.path().join("t.csv").to_str().unwrap(),
    ]);
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn version_prints_schema_versions() {
    let out = run_ok(&["--version"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "model schema",
        "report schema",
        "loans csv schema",
        "ground-truth csv schema",
    ] {
        assert!(text.contains(needle), "missing `{needle}` in:\n{text}");
    }
}

#[test]
fn dumped_market_file_reproduces_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let market = dir.path().join("market.toml");
    run_ok(&[
        "simulate",
        "--preset",
        "heterogeneous",
        "--n",
        "1000",
        "--seed",
        "13",
        "--out-loans",
        dir.path().join("a.csv").to_str().unwrap(),
        "--out-truth",
        dir.path().join("at.csv").to_str().unwrap(),
        "--dump-market",
        market.to_str().unwrap(),
    ]);
    // The dumped file carries the seed, so no --seed is needed.
    run_ok(&[
        "simulate",
        "--market",
        market.to_str().unwrap(),
        "--out-loans",
        dir.path().join("b.csv").to_str().unwrap(),
        "--out-truth",
        dir.path().join("bt.csv").to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(dir.path().join("a.csv")).unwrap(),
        std::fs::read(dir.path().join("b.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("at.csv")).unwrap(),
        std::fs::read(dir.path().join("bt.csv")).unwrap()
    );
}

#[test]
fn diagnose_and_decompose_write_documented_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (loans, model) = fixture(dir.path(), 2500, 17);

    let diag = dir.path().join("diag");
    run_ok(&[
        "diagnose",
        "--input",
        loans.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out-dir",
        diag.to_str().unwrap(),
    ]);
    for (file, header) in [
        ("hazard_curve.csv", "month,baseline_hazard"),
        ("schoenfeld.csv", "parameter,reference,month,estimate,lower,upper"),
        ("cox_snell.csv", "residual,cumulative_hazard"),
        ("ranks.csv", "month,mean_rank,lower,upper,events"),
    ] {
        let text = std::fs::read_to_string(diag.join(file)).unwrap();
        assert!(text.starts_with(header), "{file} header mismatch");
        assert!(text.lines().count() > 1, "{file} has no rows");
    }
    let report = read_json(&diag.join("diagnose_report.json"));
    assert!(report["proportionality_global"]["p_value"].as_f64().unwrap() > 0.0);
    assert!(report["concordance"].as_f64().unwrap() > 0.5);

    let dec = dir.path().join("dec");
    run_ok(&[
        "decompose",
        "--input",
        loans.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out-dir",
        dec.to_str().unwrap(),
        "--seed",
        "8",
    ]);
    let report = read_json(&dec.join("decompose_report.json"));
    for key in ["di", "di_controls", "dt"] {
        assert!(report[key]["gap"].is_number(), "missing `{key}`");
        assert!(report[key]["se"].as_f64().unwrap() > 0.0);
    }
    assert!(report["indirect_share"].is_number());
}

#[test]
fn threshold_test_emits_summary_rhat_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let (loans, model) = fixture(dir.path(), 2500, 23);
    let out_dir = dir.path().join("th");
    run_ok(&[
        "threshold-test",
        "--input",
        loans.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    let report = read_json(&out_dir.join("threshold_report.json"));
    assert_eq!(report["mcmc"]["chains"], 4);
    assert_eq!(report["replicates"], 1);
    let summaries = report["female"]["summaries"].as_array().unwrap();
    let names: Vec<&str> = summaries.iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["precision", "pi", "sigma1", "gamma"]);
    let p = report["prob_female_threshold_higher"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let rhat = read_json(&out_dir.join("rhat_report.json"));
    let entries = rhat["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 8, "two genders x four parameters");
    assert!(rhat["worst_rhat"].as_f64().unwrap() <= 1.01);

    // One trace per parameter per chain, with the documented header.
    for gender in ["female", "male"] {
        for param in ["precision", "pi", "sigma1", "gamma"] {
            for chain in 0..4 {
                let path = out_dir.join(format!("trace_{gender}_{param}_chain{chain}.csv"));
                let text = std::fs::read_to_string(&path)
                    .unwrap_or_else(|e| panic!("missing {}: {e}", path.display()));
                assert!(text.starts_with("draw,value\n"));
                assert_eq!(text.lines().count(), 5001, "5000 draws + header");
            }
        }
    }

    // --bootstrap N pools that many imputation replicates; the pooled
    // posterior keeps one trace chain per replicate.
    let pooled_dir = dir.path().join("th_pooled");
    run_ok(&[
        "threshold-test",
        "--input",
        loans.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out-dir",
        pooled_dir.to_str().unwrap(),
        "--seed",
        "4",
        "--bootstrap",
        "2",
    ]);
    let report = read_json(&pooled_dir.join("threshold_report.json"));
    assert_eq!(report["replicates"], 2);
    assert!(pooled_dir.join("trace_male_pi_chain1.csv").is_file());
    assert!(!pooled_dir.join("trace_male_pi_chain2.csv").exists());
}
