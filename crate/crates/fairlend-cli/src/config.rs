//! Run configuration: a TOML file of defaults merged with command-line
//! flags, flags winning. Every field is optional in the file; built-in
//! defaults fill whatever neither source provides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fairlend::cox::CoxConfig;
use fairlend::data::{PreprocessConfig, WinsorMode};
use fairlend::di::{BinGrid, GapRegression};
use fairlend::threshold::McmcConfig;
use serde::Deserialize;

use crate::CliError;

/// Winsorization handling, as spelled in flags and config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WinsorModeArg {
    /// Clamp outliers to the quantile bounds.
    Clamp,
    /// Drop the whole record.
    Drop,
}

impl From<WinsorModeArg> for WinsorMode {
    fn from(m: WinsorModeArg) -> WinsorMode {
        match m {
            WinsorModeArg::Clamp => WinsorMode::Clamp,
            WinsorModeArg::Drop => WinsorMode::Drop,
        }
    }
}

/// Second-stage estimator for the disparity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondStage {
    /// Binned fund-rate gap profile, aggregated with pooled weights.
    Nonparametric,
    /// OLS of funding on gender and a return spline.
    OlsDi,
    /// OLS with borrower controls added (AIC-pruned groups).
    OlsDiControls,
    /// OLS on expected returns instead of simulated draws.
    OlsDt,
}

impl SecondStage {
    pub fn name(self) -> &'static str {
        match self {
            SecondStage::Nonparametric => "nonparametric",
            SecondStage::OlsDi => "ols-di",
            SecondStage::OlsDiControls => "ols-di-controls",
            SecondStage::OlsDt => "ols-dt",
        }
    }

    /// The regression kind behind each OLS variant; `None` for the
    /// nonparametric profile.
    pub fn regression(self) -> Option<GapRegression> {
        match self {
            SecondStage::Nonparametric => None,
            SecondStage::OlsDi => Some(GapRegression::Plain),
            SecondStage::OlsDiControls => Some(GapRegression::WithControls),
            SecondStage::OlsDt => Some(GapRegression::Treatment),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub winsor_quantile: Option<f64>,
    pub winsor_mode: Option<WinsorModeArg>,
    pub rate_floor: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub default_spline_df: Option<usize>,
    pub spline_df: BTreeMap<String, usize>,
    pub time_df: Option<usize>,
    pub time_interactions: Option<Vec<String>>,
    pub covariates: Option<Vec<String>>,
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinsSection {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub width: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    pub bootstrap: Option<usize>,
    pub alpha: Option<f64>,
    pub multiplier: Option<f64>,
    pub second_stage: Option<SecondStage>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySection {
    pub multipliers: Option<Vec<f64>>,
    pub draws: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub chains: Option<usize>,
    pub warmup: Option<usize>,
    pub draws: Option<usize>,
    pub target_accept: Option<f64>,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub replicates: Option<usize>,
}

/// The run-configuration file. Unknown keys are rejected so typos fail
/// loudly instead of silently keeping a default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub data: DataSection,
    pub model: ModelSection,
    pub bins: BinsSection,
    pub estimate: EstimateSection,
    pub sensitivity: SensitivitySection,
    pub mcmc: McmcSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::config(format!("config `{}`: {e}", path.display())))
    }
}

/// Shared data-handling flags, attached to every subcommand that reads a
/// loans CSV.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct DataFlags {
    /// Two-sided winsorization quantile for heavy-tailed covariates
    /// (0 disables).
    #[arg(long, value_name = "Q")]
    pub winsor_quantile: Option<f64>,
    /// What to do with winsorization outliers.
    #[arg(long, value_enum, value_name = "MODE")]
    pub winsor_mode: Option<WinsorModeArg>,
    /// Drop applications whose contract rate is below this.
    #[arg(long, value_name = "RATE")]
    pub rate_floor: Option<f64>,
}

/// Shared hazard-model flags.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ModelFlags {
    /// Spline degrees of freedom used for continuous covariates without an
    /// explicit override.
    #[arg(long, value_name = "DF")]
    pub default_spline_df: Option<usize>,
    /// Per-covariate spline override, `name=df`; df 0 forces a linear term.
    #[arg(long = "spline-df", value_name = "NAME=DF")]
    pub spline_df: Vec<String>,
    /// Degrees of freedom of the event-month basis for time interactions.
    #[arg(long, value_name = "DF")]
    pub time_df: Option<usize>,
    /// Covariate whose effect may drift over the loan term (repeatable).
    #[arg(long = "time-interaction", value_name = "NAME")]
    pub time_interactions: Vec<String>,
    /// Restrict the hazard model to these covariates (comma separated).
    #[arg(long, value_delimiter = ',', value_name = "NAMES")]
    pub covariates: Option<Vec<String>>,
    /// Newton iteration cap for the partial-likelihood fit.
    #[arg(long, value_name = "N")]
    pub max_iterations: Option<usize>,
}

pub fn resolve_preprocess(cfg: &FileConfig, flags: &DataFlags) -> PreprocessConfig {
    let mut pre = PreprocessConfig::default();
    if let Some(q) = flags.winsor_quantile.or(cfg.data.winsor_quantile) {
        pre.winsor_quantile = q;
    }
    if let Some(m) = flags.winsor_mode.or(cfg.data.winsor_mode) {
        pre.winsor_mode = m.into();
    }
    if let Some(r) = flags.rate_floor.or(cfg.data.rate_floor) {
        pre.rate_floor = r;
    }
    pre
}

pub fn resolve_cox(cfg: &FileConfig, flags: &ModelFlags) -> Result<CoxConfig, CliError> {
    let mut cox = CoxConfig::default();
    if let Some(df) = flags.default_spline_df.or(cfg.model.default_spline_df) {
        cox.default_spline_df = df;
    }
    cox.spline_df = cfg.model.spline_df.clone();
    for pair in &flags.spline_df {
        let (name, df) = pair
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--spline-df wants NAME=DF, got `{pair}`")))?;
        let df: usize = df
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("--spline-df `{pair}`: bad integer")))?;
        cox.spline_df.insert(name.trim().to_string(), df);
    }
    if let Some(df) = flags.time_df.or(cfg.model.time_df) {
        cox.time_df = df;
    }
    if !flags.time_interactions.is_empty() {
        cox.time_interactions = flags.time_interactions.clone();
    } else if let Some(ti) = &cfg.model.time_interactions {
        cox.time_interactions = ti.clone();
    }
    if let Some(cov) = flags.covariates.clone().or_else(|| cfg.model.covariates.clone()) {
        cox.covariates = Some(cov);
    }
    if let Some(n) = flags.max_iterations.or(cfg.model.max_iterations) {
        cox.max_iterations = n;
    }
    Ok(cox)
}

/// Parse the `--bins lower,upper,width` triple, falling back to the config
/// file and then the library default.
pub fn resolve_bins(cfg: &FileConfig, flag: Option<&str>) -> Result<BinGrid, CliError> {
    let mut grid = BinGrid::default();
    if let Some(l) = cfg.bins.lower {
        grid.lower = l;
    }
    if let Some(u) = cfg.bins.upper {
        grid.upper = u;
    }
    if let Some(w) = cfg.bins.width {
        grid.width = w;
    }
    if let Some(text) = flag {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(CliError::config(format!(
                "--bins wants LOWER,UPPER,WIDTH, got `{text}`"
            )));
        }
        let parse = |s: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|_| CliError::config(format!("--bins `{text}`: bad number `{s}`")))
        };
        grid.lower = parse(parts[0])?;
        grid.upper = parse(parts[1])?;
        grid.width = parse(parts[2])?;
    }
    grid.validate()?;
    Ok(grid)
}

pub fn resolve_seed(
    cfg: &FileConfig,
    flag: Option<u64>,
    subcommand: &str,
) -> Result<u64, CliError> {
    flag.or(cfg.seed).ok_or_else(|| {
        CliError::config(format!(
            "`{subcommand}` is stochastic and needs a seed: pass --seed or set `seed` in the config file"
        ))
    })
}

pub fn resolve_mcmc(
    cfg: &FileConfig,
    chains: Option<usize>,
    warmup: Option<usize>,
    draws: Option<usize>,
) -> Result<McmcConfig, CliError> {
    let mut mcmc = McmcConfig::default();
    if let Some(c) = chains.or(cfg.mcmc.chains) {
        mcmc.chains = c;
    }
    if let Some(w) = warmup.or(cfg.mcmc.warmup) {
        mcmc.warmup = w;
    }
    if let Some(d) = draws.or(cfg.mcmc.draws) {
        mcmc.draws = d;
    }
    if let Some(t) = cfg.mcmc.target_accept {
        mcmc.target_accept = t;
    }
    if let Some(r) = cfg.mcmc.max_rhat {
        mcmc.max_rhat = r;
    }
    if let Some(e) = cfg.mcmc.min_ess {
        mcmc.min_ess = e;
    }
    mcmc.validate()?;
    Ok(mcmc)
}

/// Fail early when an input path is missing, naming the flag.
pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::config(format!(
            "{what} `{}` does not exist",
            path.display()
        )));
    }
    Ok(())
}

/// Create the directory holding `path` (and the directory itself for
/// `--out-dir` style arguments).
pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("cannot create `{}`: {e}", dir.display())))
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    Ok(())
}

/// Comma-separated multiplier list.
pub fn parse_multipliers(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(str::trim)
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::config(format!("--multipliers: bad number `{s}`")))
        })
        .collect()
}

/// `name=expr` subset arguments.
pub fn parse_subsets(
    args: &[String],
) -> Result<Vec<(String, fairlend::di::SubsetFilter)>, CliError> {
    args.iter()
        .map(|raw| {
            let (name, expr) = raw.split_once('=').ok_or_else(|| {
                CliError::config(format!("--subset wants NAME=EXPR, got `{raw}`"))
            })?;
            if name.trim().is_empty() {
                return Err(CliError::config(format!("--subset `{raw}`: empty name")));
            }
            let filter: fairlend::di::SubsetFilter = expr.parse()?;
            Ok((name.trim().to_string(), filter))
        })
        .collect()
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
