//! `fairlend` — one binary exposing the disparity-measurement pipeline:
//! simulate, fit, diagnose, estimate-di, decompose, sensitivity, and
//! threshold-test.
//!
//! Settings come from an optional TOML config file (`--config`) merged with
//! command-line flags; flags win. Every stochastic subcommand requires a
//! seed, and all randomness flows from it through counter-based streams, so
//! identical `(config, seed)` runs are byte-identical regardless of
//! `--threads`.

mod commands;
mod config;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::FileConfig;
use crate::reports::REPORT_SCHEMA_VERSION;

/// Pipeline failure with a stable machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> CliError {
        CliError {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn config(message: String) -> CliError {
        CliError::new("config", message)
    }

    /// One-line JSON for stderr, so callers can parse failures.
    fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind, "message": self.message } }).to_string()
    }
}

impl From<fairlend::Error> for CliError {
    fn from(e: fairlend::Error) -> CliError {
        use fairlend::Error as E;
        let kind = match &e {
            E::NoRecords => "no-records",
            E::Csv { .. } => "csv",
            E::Io(_) => "io",
            E::MalformedPayments { .. } => "malformed-payments",
            E::CensoredOutcome { .. } => "censored-outcome",
            E::DegenerateKnots(_) => "degenerate-knots",
            E::InvalidConfig(_) => "config",
            E::RankDeficient(_) => "rank-deficient",
            E::NoConvergence { .. } => "no-convergence",
            E::NoEvents => "no-events",
            E::NoComparablePairs => "no-comparable-pairs",
            E::ResidualsUndefined => "residuals-undefined",
            E::SingleGender => "single-gender",
            E::BootstrapFailures { .. } => "bootstrap-failures",
            E::NoMixing { .. } => "no-mixing",
            E::InvalidMarketSpec(_) => "market-spec",
            E::ModelDecode(_) => "model-decode",
            E::Serialize(_) => "serialize",
        };
        CliError::new(kind, e.to_string())
    }
}

fn long_version() -> &'static str {
    static TEXT: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "{}\nmodel schema: {}\nreport schema: {}\nloans csv schema: {}\nground-truth csv schema: {}",
            env!("CARGO_PKG_VERSION"),
            fairlend::cox::MODEL_VERSION,
            REPORT_SCHEMA_VERSION,
            fairlend::io::LOANS_SCHEMA_VERSION,
            fairlend::io::TRUTH_SCHEMA_VERSION,
        )
    })
}

#[derive(Parser)]
#[command(
    name = "fairlend",
    version,
    long_version = long_version(),
    about = "Measure funding disparities in installment lending",
    after_help = "Config file keys mirror the flag names; flags win. \
                  Stochastic subcommands (simulate, estimate-di, decompose, \
                  sensitivity, threshold-test) require a seed."
)]
struct Cli {
    /// TOML run-configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores). Outputs
    /// do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic market: loans CSV plus ground-truth CSV.
    Simulate(commands::SimulateArgs),
    /// Fit the discrete-time hazard model and save it to a file.
    Fit(commands::FitArgs),
    /// Model diagnostics: proportionality, calibration, ranks, concordance.
    Diagnose(commands::DiagnoseArgs),
    /// Estimate the funding disparity with bootstrap confidence intervals.
    EstimateDi(commands::EstimateDiArgs),
    /// Split the disparity into plain, controlled, and expected-return
    /// gender coefficients.
    Decompose(commands::DecomposeArgs),
    /// Sweep the unfunded-hazard multiplier and trace the disparity.
    Sensitivity(commands::SensitivityArgs),
    /// Bayesian threshold test: posterior over each gender's funding bar.
    ThresholdTest(commands::ThresholdTestArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    if let Some(threads) = cli.threads.or(cfg.threads) {
        if threads == 0 {
            return Err(CliError::config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size the thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(args) => commands::simulate(&cfg, args),
        Command::Fit(args) => commands::fit_cmd(&cfg, args),
        Command::Diagnose(args) => commands::diagnose(&cfg, args),
        Command::EstimateDi(args) => commands::estimate_di(&cfg, args),
        Command::Decompose(args) => commands::decompose(&cfg, args),
        Command::Sensitivity(args) => commands::sensitivity(&cfg, args),
        Command::ThresholdTest(args) => commands::threshold_test(&cfg, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
