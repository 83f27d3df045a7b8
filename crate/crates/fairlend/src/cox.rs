//! Discrete-time proportional hazards engine.
//!
//! Loans live on a 12-month grid, so the model is a grouped Cox regression:
//! the month-`t` hazard for covariates `x` is
//!
//! ```text
//! h(t | x) = h0(t) * exp(b1' f(x) + b2' (f_I(x) kron s(t)))
//! ```
//!
//! where `f` expands raw covariates (dummies pass through, continuous
//! covariates become centered natural-spline columns), `s` is a natural
//! spline basis over event months, and `f_I` is the subset of columns whose
//! effects may drift over time. Estimation maximizes the partial likelihood
//! with Efron's adjustment for the heavy monthly ties, in counting-process
//! form: a loan contributes one implicit row per month at risk, and the
//! time-varying columns are rebuilt on the fly instead of materializing the
//! episode-split matrix.
//!
//! The fitted object carries a Breslow-type monthly baseline, the observed
//! information, and a robust (sandwich) covariance assembled from per-loan
//! score residuals.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateLayout, RepaymentOutcome, SurvivalSample};
use crate::error::{Error, Result};
use crate::spline::SplineSpec;

/// Months in a loan term.
pub const MONTHS: usize = 12;

/// Fixed chunk length for parallel reductions. Partial sums are merged in
/// chunk order, so results do not depend on the thread count.
const CHUNK: usize = 4096;

/// Fitting configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoxConfig {
    /// Spline degrees of freedom for continuous covariates not listed in
    /// `spline_df`.
    pub default_spline_df: usize,
    /// Per-covariate overrides; a value of 0 or 1 forces a plain linear
    /// column.
    pub spline_df: BTreeMap<String, usize>,
    /// Degrees of freedom of the time basis (used only when
    /// `time_interactions` is nonempty).
    pub time_df: usize,
    /// Raw covariate names whose expanded columns get time interactions.
    pub time_interactions: Vec<String>,
    /// Explicit time basis override; when unset the basis is built from the
    /// observed event months.
    pub time_spec: Option<SplineSpec>,
    /// Restrict the design to these raw covariates (`None` = all).
    pub covariates: Option<Vec<String>>,
    pub max_iterations: usize,
    /// Relative log-likelihood change declaring convergence.
    pub tolerance: f64,
    /// Relative infinity-norm the gradient must reach at the solution.
    pub gradient_tolerance: f64,
}

impl Default for CoxConfig {
    fn default() -> Self {
        CoxConfig {
            default_spline_df: 4,
            spline_df: BTreeMap::new(),
            time_df: 3,
            time_interactions: vec!["male".into()],
            time_spec: None,
            covariates: None,
            max_iterations: 50,
            tolerance: 1e-9,
            gradient_tolerance: 1e-6,
        }
    }
}

/// How one design column is computed from the raw covariate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnDef {
    /// Pass-through of a raw slot (indicator columns).
    Raw { source: usize },
    /// Centered linear term.
    Linear { source: usize, center: f64 },
    /// One component of a spline expansion; `spline` indexes
    /// [`FittedHazardModel::splines`].
    Spline {
        source: usize,
        spline: usize,
        component: usize,
    },
}

/// A named design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelColumn {
    pub name: String,
    pub def: ColumnDef,
}

/// Dense symmetric matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }
}

/// A fitted hazard model, self-describing enough to score new loans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedHazardModel {
    /// Schema version of this structure.
    pub version: u32,
    /// Raw covariate names the model expects, in slot order.
    pub raw_names: Vec<String>,
    /// Main-effect design columns.
    pub columns: Vec<ModelColumn>,
    /// Spline expansions referenced by the columns.
    pub splines: Vec<SplineSpec>,
    /// Indices into `columns` that carry time interactions.
    pub interaction_columns: Vec<usize>,
    /// Basis over event months (present iff interactions exist).
    pub time_spec: Option<SplineSpec>,
    /// Main-effect coefficients, one per design column.
    pub beta_main: Vec<f64>,
    /// Interaction coefficients, laid out `[col][time component]`.
    pub beta_time: Vec<f64>,
    /// Monthly baseline hazards at the reference cell.
    pub baseline: Vec<f64>,
    /// Inverse observed information.
    pub naive_covariance: SymMatrix,
    /// Sandwich covariance from per-loan score residuals.
    pub robust_covariance: SymMatrix,
    pub loglik: f64,
    /// Log-likelihood after each Newton step (monotone by construction).
    pub iteration_loglik: Vec<f64>,
    pub n_samples: usize,
    pub n_events: usize,
    /// Harrell-type concordance of the training sample.
    pub concordance: f64,
    /// Constant columns excluded from the design.
    pub dropped_columns: Vec<String>,
}

pub const MODEL_VERSION: u32 = 1;

impl FittedHazardModel {
    /// Number of fitted parameters (main + interaction).
    pub fn n_parameters(&self) -> usize {
        self.beta_main.len() + self.beta_time.len()
    }

    /// Parameter names aligned with the covariance matrices.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.columns.iter().map(|c| c.name.clone()).collect();
        let q = self.time_spec.as_ref().map_or(0, SplineSpec::dim);
        for &c in &self.interaction_columns {
            for b in 0..q {
                names.push(format!("{}:t{}", self.columns[c].name, b));
            }
        }
        names
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FittedHazardModel> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let model: FittedHazardModel =
            serde_json::from_str(&text).map_err(|e| Error::ModelDecode(e.to_string()))?;
        if model.version != MODEL_VERSION {
            return Err(Error::ModelDecode(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                model.version
            )));
        }
        Ok(model)
    }

    /// Main-effect design row for a raw covariate vector.
    fn design_row(&self, raw: &[f64], out: &mut [f64]) {
        debug_assert_eq!(raw.len(), self.raw_names.len());
        debug_assert_eq!(out.len(), self.columns.len());
        let mut scratch: Vec<Vec<f64>> = vec![Vec::new(); self.splines.len()];
        for (o, col) in out.iter_mut().zip(&self.columns) {
            *o = match &col.def {
                ColumnDef::Raw { source } => raw[*source],
                ColumnDef::Linear { source, center } => raw[*source] - center,
                ColumnDef::Spline {
                    source,
                    spline,
                    component,
                } => {
                    if scratch[*spline].is_empty() {
                        scratch[*spline] = self.splines[*spline].evaluate(raw[*source]);
                    }
                    scratch[*spline][*component]
                }
            };
        }
    }

    /// Hazard of month `t` for raw covariates, clamped to `[0, 1]`.
    pub fn hazard(&self, raw: &[f64], t: u8) -> f64 {
        self.monthly_hazards(raw)[t as usize]
    }

    /// All twelve monthly hazards for one loan, clamped to `[0, 1]`.
    pub fn monthly_hazards(&self, raw: &[f64]) -> [f64; MONTHS] {
        let p = self.columns.len();
        let mut z = vec![0.0; p];
        self.design_row(raw, &mut z);
        let main: f64 = z.iter().zip(&self.beta_main).map(|(a, b)| a * b).sum();
        let mut out = [0.0; MONTHS];
        let q = self.time_spec.as_ref().map_or(0, SplineSpec::dim);
        for (t, o) in out.iter_mut().enumerate() {
            let mut eta = main;
            if let Some(spec) = &self.time_spec {
                let s = spec.evaluate(t as f64);
                for (a, &c) in self.interaction_columns.iter().enumerate() {
                    for (b, sb) in s.iter().enumerate().take(q) {
                        eta += self.beta_time[a * q + b] * z[c] * sb;
                    }
                }
            }
            // Zero-baseline months stay zero even when exp(eta) overflows.
            *o = if self.baseline[t] == 0.0 {
                0.0
            } else {
                (self.baseline[t] * eta.exp()).clamp(0.0, 1.0)
            };
        }
        out
    }

    /// Risk score used for concordance: expected number of default events
    /// over the whole term (sum of monthly hazards).
    pub fn risk_score(&self, raw: &[f64]) -> f64 {
        self.monthly_hazards(raw).iter().sum()
    }

    /// Simulate the remaining repayment path of a loan from `start_month`
    /// with every monthly hazard scaled by `multiplier` (and re-clamped).
    ///
    /// `start_month` is the number of installments already observed paid;
    /// months `start_month..12` are drawn as independent default trials.
    pub fn predict_repayment_scaled(
        &self,
        raw: &[f64],
        rate: f64,
        start_month: u8,
        multiplier: f64,
        rng: &mut impl Rng,
    ) -> RepaymentOutcome {
        let hazards = self.monthly_hazards(raw);
        let mut default_month = None;
        for (t, &h) in hazards.iter().enumerate().skip(start_month as usize) {
            let p = (h * multiplier).clamp(0.0, 1.0);
            if rng.gen::<f64>() < p {
                default_month = Some(t as u8);
                break;
            }
        }
        RepaymentOutcome::from_default_month(default_month, rate)
    }

    /// [`predict_repayment_scaled`] with multiplier 1.
    ///
    /// [`predict_repayment_scaled`]: FittedHazardModel::predict_repayment_scaled
    pub fn predict_repayment(
        &self,
        raw: &[f64],
        rate: f64,
        start_month: u8,
        rng: &mut impl Rng,
    ) -> RepaymentOutcome {
        self.predict_repayment_scaled(raw, rate, start_month, 1.0, rng)
    }

    /// Expectation of the repayment ratio under the simulation in
    /// [`predict_repayment_scaled`], computed analytically.
    ///
    /// [`predict_repayment_scaled`]: FittedHazardModel::predict_repayment_scaled
    pub fn expected_repayment_scaled(&self, raw: &[f64], start_month: u8, multiplier: f64) -> f64 {
        let hazards = self.monthly_hazards(raw);
        let mut expected = 0.0;
        let mut alive = 1.0;
        for (t, &h) in hazards.iter().enumerate().skip(start_month as usize) {
            let p = (h * multiplier).clamp(0.0, 1.0);
            expected += alive * p * (t as f64 / 12.0);
            alive *= 1.0 - p;
        }
        expected + alive
    }

    /// Rebuild the fitting context for a sample set (used by diagnostics).
    pub(crate) fn context<'a>(&self, samples: &'a [SurvivalSample]) -> Result<DesignContext<'a>> {
        DesignContext::from_model(self, samples)
    }
}

/// Expanded design and episode structure shared by fitting and diagnostics.
pub(crate) struct DesignContext<'a> {
    pub samples: &'a [SurvivalSample],
    /// Main design, `n x p` row-major.
    pub main: Vec<f64>,
    pub p: usize,
    /// Indices of main columns with time interactions.
    pub inter: Vec<usize>,
    /// Time basis, `12 x q` row-major (empty when `q = 0`).
    pub time_basis: Vec<f64>,
    pub q: usize,
}

impl<'a> DesignContext<'a> {
    fn from_model(model: &FittedHazardModel, samples: &'a [SurvivalSample]) -> Result<Self> {
        let p = model.columns.len();
        let mut main = vec![0.0; samples.len() * p];
        for (i, s) in samples.iter().enumerate() {
            if s.covariates.len() != model.raw_names.len() {
                return Err(Error::InvalidConfig(format!(
                    "sample has {} covariates, model expects {}",
                    s.covariates.len(),
                    model.raw_names.len()
                )));
            }
            model.design_row(&s.covariates, &mut main[i * p..(i + 1) * p]);
        }
        let q = model.time_spec.as_ref().map_or(0, SplineSpec::dim);
        let mut time_basis = vec![0.0; MONTHS * q];
        if let Some(spec) = &model.time_spec {
            for t in 0..MONTHS {
                spec.evaluate_into(t as f64, &mut time_basis[t * q..(t + 1) * q]);
            }
        }
        Ok(DesignContext {
            samples,
            main,
            p,
            inter: model.interaction_columns.clone(),
            time_basis,
            q,
        })
    }

    /// Total parameter count.
    pub fn width(&self) -> usize {
        self.p + self.inter.len() * self.q
    }

    /// Build the full episode row for sample `i` at month `t`.
    pub fn row_into(&self, i: usize, t: usize, out: &mut [f64]) {
        let x = &self.main[i * self.p..(i + 1) * self.p];
        out[..self.p].copy_from_slice(x);
        let s = &self.time_basis[t * self.q..(t + 1) * self.q];
        for (a, &c) in self.inter.iter().enumerate() {
            for (b, &sb) in s.iter().enumerate() {
                out[self.p + a * self.q + b] = x[c] * sb;
            }
        }
    }

    /// Per-month effective coefficients `theta_t` such that
    /// `eta(i, t) = x_i . theta_t` over main columns only.
    fn thetas(&self, beta: &[f64]) -> [Vec<f64>; MONTHS] {
        let mut out: [Vec<f64>; MONTHS] = std::array::from_fn(|_| beta[..self.p].to_vec());
        for (t, theta) in out.iter_mut().enumerate() {
            let s = &self.time_basis[t * self.q..(t + 1) * self.q];
            for (a, &c) in self.inter.iter().enumerate() {
                for (b, &sb) in s.iter().enumerate() {
                    theta[c] += beta[self.p + a * self.q + b] * sb;
                }
            }
        }
        out
    }
}

/// Per-month risk-set aggregates at a fixed coefficient vector.
#[derive(Clone)]
pub(crate) struct MonthStats {
    /// Weighted risk-set size, weighted covariate sum, weighted outer sum.
    pub s: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Same three restricted to the month's events.
    pub sd: f64,
    pub ad: Vec<f64>,
    pub bd: Vec<f64>,
    /// Unweighted covariate sum over events and their linear predictors.
    pub zd: Vec<f64>,
    pub eta_d: f64,
    /// Event and risk-set counts.
    pub deaths: usize,
    pub at_risk: usize,
}

impl MonthStats {
    fn new(w: usize) -> Self {
        MonthStats {
            s: 0.0,
            a: vec![0.0; w],
            b: vec![0.0; w * (w + 1) / 2],
            sd: 0.0,
            ad: vec![0.0; w],
            bd: vec![0.0; w * (w + 1) / 2],
            zd: vec![0.0; w],
            eta_d: 0.0,
            deaths: 0,
            at_risk: 0,
        }
    }

    fn merge(&mut self, other: &MonthStats) {
        self.s += other.s;
        self.sd += other.sd;
        self.eta_d += other.eta_d;
        self.deaths += other.deaths;
        self.at_risk += other.at_risk;
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += *y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += *y;
        }
        for (x, y) in self.ad.iter_mut().zip(&other.ad) {
            *x += *y;
        }
        for (x, y) in self.bd.iter_mut().zip(&other.bd) {
            *x += *y;
        }
        for (x, y) in self.zd.iter_mut().zip(&other.zd) {
            *x += *y;
        }
    }
}

fn rank1_packed(b: &mut [f64], z: &[f64], w: f64) {
    let n = z.len();
    let mut idx = 0;
    for i in 0..n {
        let wz = w * z[i];
        for zj in &z[i..n] {
            b[idx] += wz * zj;
            idx += 1;
        }
    }
}

fn packed_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * dim - i * (i + 1) / 2 + j
}

/// One pass over the data: per-month aggregates at `beta`.
pub(crate) fn month_stats(ctx: &DesignContext, beta: &[f64]) -> Vec<MonthStats> {
    let w = ctx.width();
    let thetas = ctx.thetas(beta);
    let n = ctx.samples.len();
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<MonthStats>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut acc: Vec<MonthStats> = (0..MONTHS).map(|_| MonthStats::new(w)).collect();
            let mut z = vec![0.0; w];
            for i in lo..hi {
                let sample = &ctx.samples[i];
                let Some(last) = sample.last_risk_month() else {
                    continue;
                };
                let x = &ctx.main[i * ctx.p..(i + 1) * ctx.p];
                for t in 0..=last as usize {
                    let eta: f64 = x.iter().zip(&thetas[t]).map(|(a, b)| a * b).sum();
                    let wgt = eta.exp();
                    ctx.row_into(i, t, &mut z);
                    let m = &mut acc[t];
                    m.at_risk += 1;
                    m.s += wgt;
                    for (ai, zi) in m.a.iter_mut().zip(&z) {
                        *ai += wgt * zi;
                    }
                    rank1_packed(&mut m.b, &z, wgt);
                    let event_here = !sample.censored && sample.time as usize == t;
                    if event_here {
                        m.deaths += 1;
                        m.sd += wgt;
                        m.eta_d += eta;
                        for (ai, zi) in m.ad.iter_mut().zip(&z) {
                            *ai += wgt * zi;
                        }
                        rank1_packed(&mut m.bd, &z, wgt);
                        for (ai, zi) in m.zd.iter_mut().zip(&z) {
                            *ai += zi;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total: Vec<MonthStats> = (0..MONTHS).map(|_| MonthStats::new(w)).collect();
    for part in &partials {
        for (t, m) in total.iter_mut().enumerate() {
            m.merge(&part[t]);
        }
    }
    total
}

/// Efron-adjusted log-likelihood, score, and observed information from
/// per-month aggregates.
pub(crate) fn efron_derivatives(stats: &[MonthStats], w: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut loglik = 0.0;
    let mut grad = vec![0.0; w];
    let mut info = vec![0.0; w * w];
    let packed = w * (w + 1) / 2;
    let mut mk = vec![0.0; w];
    for m in stats {
        if m.deaths == 0 {
            continue;
        }
        loglik += m.eta_d;
        for (g, z) in grad.iter_mut().zip(&m.zd) {
            *g += *z;
        }
        let d = m.deaths as f64;
        for k in 0..m.deaths {
            let frac = k as f64 / d;
            let sk = m.s - frac * m.sd;
            loglik -= sk.ln();
            for j in 0..w {
                mk[j] = (m.a[j] - frac * m.ad[j]) / sk;
                grad[j] -= mk[j];
            }
            // info += (B - frac Bd)/sk - mk mk'
            let mut idx = 0;
            for i in 0..w {
                for j in i..w {
                    debug_assert_eq!(idx, packed_index(w, i, j));
                    let v = (m.b[idx] - frac * m.bd[idx]) / sk - mk[i] * mk[j];
                    info[i * w + j] += v;
                    if i != j {
                        info[j * w + i] += v;
                    }
                    idx += 1;
                }
            }
            debug_assert_eq!(idx, packed);
        }
    }
    (loglik, grad, info)
}

fn loglik_only(ctx: &DesignContext, beta: &[f64]) -> f64 {
    let stats = month_stats(ctx, beta);
    let mut loglik = 0.0;
    for m in &stats {
        if m.deaths == 0 {
            continue;
        }
        loglik += m.eta_d;
        let d = m.deaths as f64;
        for k in 0..m.deaths {
            loglik -= (m.s - (k as f64 / d) * m.sd).ln();
        }
    }
    loglik
}

/// LDL factor with failure index, used to name a collinear column.
fn solve_spd(info: &[f64], rhs: &[f64], w: usize) -> std::result::Result<Vec<f64>, usize> {
    let mut a = nalgebra::DMatrix::from_row_slice(w, w, info);
    // Manual Cholesky to find the first non-positive pivot.
    for j in 0..w {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= a[(j, k)] * a[(j, k)];
        }
        if pivot <= 1e-12 * info[j * w + j].abs().max(1e-300) {
            return Err(j);
        }
        let pivot = pivot.sqrt();
        a[(j, j)] = pivot;
        for i in (j + 1)..w {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = v / pivot;
        }
    }
    // Forward/back substitution.
    let mut x = rhs.to_vec();
    for i in 0..w {
        for k in 0..i {
            x[i] -= a[(i, k)] * x[k];
        }
        x[i] /= a[(i, i)];
    }
    for i in (0..w).rev() {
        for k in (i + 1)..w {
            x[i] -= a[(k, i)] * x[k];
        }
        x[i] /= a[(i, i)];
    }
    Ok(x)
}

fn invert_spd(info: &[f64], w: usize, names: &[String]) -> Result<Vec<f64>> {
    let mut inv = vec![0.0; w * w];
    for j in 0..w {
        let mut e = vec![0.0; w];
        e[j] = 1.0;
        let col = solve_spd(info, &e, w).map_err(|c| {
            Error::RankDeficient(names.get(c).cloned().unwrap_or_else(|| format!("#{c}")))
        })?;
        for i in 0..w {
            inv[i * w + j] = col[i];
        }
    }
    Ok(inv)
}

/// Build design columns from data and configuration.
fn build_columns(
    samples: &[SurvivalSample],
    layout: &CovariateLayout,
    config: &CoxConfig,
) -> Result<(Vec<ModelColumn>, Vec<SplineSpec>, Vec<String>)> {
    let selected: Vec<usize> = match &config.covariates {
        None => (0..layout.width()).collect(),
        Some(names) => {
            let mut idx = Vec::with_capacity(names.len());
            for n in names {
                let i = layout
                    .names
                    .iter()
                    .position(|l| l == n)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown covariate `{n}`")))?;
                idx.push(i);
            }
            idx
        }
    };
    let mut columns = Vec::new();
    let mut splines = Vec::new();
    let mut dropped = Vec::new();
    for &slot in &selected {
        let name = &layout.names[slot];
        let values: Vec<f64> = samples.iter().map(|s| s.covariates[slot]).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            dropped.push(name.clone());
            continue;
        }
        if !layout.continuous[slot] {
            columns.push(ModelColumn {
                name: name.clone(),
                def: ColumnDef::Raw { source: slot },
            });
            continue;
        }
        let df = config
            .spline_df
            .get(name)
            .copied()
            .unwrap_or(config.default_spline_df);
        if df >= 2 {
            match SplineSpec::from_values(&values, df) {
                Ok(spec) => {
                    let id = splines.len();
                    for k in 0..spec.dim() {
                        columns.push(ModelColumn {
                            name: format!("{name}_s{k}"),
                            def: ColumnDef::Spline {
                                source: slot,
                                spline: id,
                                component: k,
                            },
                        });
                    }
                    splines.push(spec);
                    continue;
                }
                Err(Error::DegenerateKnots(_)) => {
                    // Too few distinct values for knots: enter linearly.
                }
                Err(e) => return Err(e),
            }
        }
        let center = values.iter().sum::<f64>() / values.len() as f64;
        columns.push(ModelColumn {
            name: name.clone(),
            def: ColumnDef::Linear {
                source: slot,
                center,
            },
        });
    }
    Ok((columns, splines, dropped))
}

/// Fit the hazard model.
pub fn fit(
    samples: &[SurvivalSample],
    layout: &CovariateLayout,
    config: &CoxConfig,
) -> Result<FittedHazardModel> {
    if samples.is_empty() {
        return Err(Error::NoRecords);
    }
    for s in samples {
        if s.covariates.len() != layout.width() {
            return Err(Error::InvalidConfig(format!(
                "sample has {} covariates, layout expects {}",
                s.covariates.len(),
                layout.width()
            )));
        }
        if s.time as usize > MONTHS || (!s.censored && s.time as usize >= MONTHS) {
            return Err(Error::InvalidConfig(format!(
                "observation month {} out of range",
                s.time
            )));
        }
    }
    let event_times: Vec<f64> = samples
        .iter()
        .filter(|s| !s.censored)
        .map(|s| s.time as f64)
        .collect();
    if event_times.is_empty() {
        return Err(Error::NoEvents);
    }

    let (columns, splines, dropped) = build_columns(samples, layout, config)?;

    // Interaction columns: expanded columns of the configured raw names.
    let mut interaction_columns = Vec::new();
    let mut time_spec = None;
    if !config.time_interactions.is_empty() {
        for raw_name in &config.time_interactions {
            let slot = layout
                .names
                .iter()
                .position(|n| n == raw_name)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("unknown interaction covariate `{raw_name}`"))
                })?;
            for (j, col) in columns.iter().enumerate() {
                let src = match col.def {
                    ColumnDef::Raw { source } => source,
                    ColumnDef::Linear { source, .. } => source,
                    ColumnDef::Spline { source, .. } => source,
                };
                if src == slot {
                    interaction_columns.push(j);
                }
            }
        }
        interaction_columns.sort_unstable();
        interaction_columns.dedup();
        if !interaction_columns.is_empty() {
            time_spec = Some(match &config.time_spec {
                Some(s) => s.clone(),
                None => SplineSpec::from_values(&event_times, config.time_df)?,
            });
        }
    }

    let mut model = FittedHazardModel {
        version: MODEL_VERSION,
        raw_names: layout.names.clone(),
        columns,
        splines,
        interaction_columns,
        time_spec,
        beta_main: Vec::new(),
        beta_time: Vec::new(),
        baseline: vec![0.0; MONTHS],
        naive_covariance: SymMatrix { dim: 0, data: Vec::new() },
        robust_covariance: SymMatrix { dim: 0, data: Vec::new() },
        loglik: 0.0,
        iteration_loglik: Vec::new(),
        n_samples: samples.len(),
        n_events: event_times.len(),
        concordance: 0.5,
        dropped_columns: dropped,
    };
    let ctx = model.context(samples)?;
    let w = ctx.width();
    let names = model.parameter_names();

    // Newton ascent with step halving.
    let mut beta = vec![0.0; w];
    let mut loglik = loglik_only(&ctx, &beta);
    let mut trace = vec![loglik];
    let mut converged = false;
    for _ in 0..config.max_iterations {
        let stats = month_stats(&ctx, &beta);
        let (ll, grad, info) = efron_derivatives(&stats, w);
        debug_assert!((ll - loglik).abs() <= 1e-6 * (1.0 + loglik.abs()));
        let step = match solve_spd(&info, &grad, w) {
            Ok(s) => s,
            Err(c) => {
                return Err(Error::RankDeficient(
                    names.get(c).cloned().unwrap_or_else(|| format!("#{c}")),
                ))
            }
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = beta
                .iter()
                .zip(&step)
                .map(|(b, s)| b + scale * s)
                .collect();
            let cand_ll = loglik_only(&ctx, &cand);
            if cand_ll.is_finite() && cand_ll >= loglik - 1e-12 {
                beta = cand;
                let change = (cand_ll - loglik).abs();
                loglik = cand_ll;
                trace.push(loglik);
                accepted = true;
                if change <= config.tolerance * (loglik.abs() + 1.0) {
                    // Likelihood has flattened; verify the score criterion.
                    let stats = month_stats(&ctx, &beta);
                    let (_, g2, _) = efron_derivatives(&stats, w);
                    let gnorm = g2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if gnorm <= config.gradient_tolerance * (loglik.abs() + 1.0) {
                        converged = true;
                    }
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if converged {
            break;
        }
    }
    if !converged && w > 0 {
        let stats = month_stats(&ctx, &beta);
        let (_, grad, _) = efron_derivatives(&stats, w);
        let gnorm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::NoConvergence {
            iterations: trace.len() - 1,
            gradient_norm: gnorm / (loglik.abs() + 1.0),
        });
    }

    // Final aggregates: baseline, information, covariances.
    let stats = month_stats(&ctx, &beta);
    let (_, _, info) = efron_derivatives(&stats, w);
    for (t, m) in stats.iter().enumerate() {
        model.baseline[t] = if m.at_risk == 0 || m.s <= 0.0 {
            0.0
        } else {
            (m.deaths as f64 / m.s).clamp(0.0, 1.0)
        };
    }
    model.beta_main = beta[..ctx.p].to_vec();
    model.beta_time = beta[ctx.p..].to_vec();
    model.loglik = loglik;
    model.iteration_loglik = trace;
    if w > 0 {
        let naive = invert_spd(&info, w, &names)?;
        let scores = score_residuals(&ctx, &beta, &stats);
        // V = I^-1 (sum_i U_i U_i') I^-1
        let mut meat = vec![0.0; w * w];
        for u in &scores {
            for i in 0..w {
                for j in 0..w {
                    meat[i * w + j] += u[i] * u[j];
                }
            }
        }
        let mut robust = vec![0.0; w * w];
        // robust = naive * meat * naive
        let mut tmp = vec![0.0; w * w];
        for i in 0..w {
            for j in 0..w {
                let mut v = 0.0;
                for k in 0..w {
                    v += naive[i * w + k] * meat[k * w + j];
                }
                tmp[i * w + j] = v;
            }
        }
        for i in 0..w {
            for j in 0..w {
                let mut v = 0.0;
                for k in 0..w {
                    v += tmp[i * w + k] * naive[k * w + j];
                }
                robust[i * w + j] = v;
            }
        }
        model.naive_covariance = SymMatrix { dim: w, data: naive };
        model.robust_covariance = SymMatrix { dim: w, data: robust };
    }
    model.concordance = match concordance(&model, samples) {
        Ok(c) => c,
        // All events tied: no ordering information in the training sample.
        Err(Error::NoComparablePairs) => 0.5,
        Err(e) => return Err(e),
    };
    Ok(model)
}

/// Per-loan score residuals at `beta` (martingale-centered, Efron weights).
fn score_residuals(ctx: &DesignContext, beta: &[f64], stats: &[MonthStats]) -> Vec<Vec<f64>> {
    let w = ctx.width();
    // Per month: hazard-sum scalars and mean vectors for the two roles.
    struct MonthTerms {
        g_all: f64,
        h_all: Vec<f64>,
        g_death: f64,
        h_death: Vec<f64>,
        m_bar: Vec<f64>,
    }
    let terms: Vec<MonthTerms> = stats
        .iter()
        .map(|m| {
            let mut t = MonthTerms {
                g_all: 0.0,
                h_all: vec![0.0; w],
                g_death: 0.0,
                h_death: vec![0.0; w],
                m_bar: vec![0.0; w],
            };
            if m.deaths == 0 {
                return t;
            }
            let d = m.deaths as f64;
            for k in 0..m.deaths {
                let frac = k as f64 / d;
                let sk = m.s - frac * m.sd;
                t.g_all += 1.0 / sk;
                t.g_death += (1.0 - frac) / sk;
                for j in 0..w {
                    let mkj = (m.a[j] - frac * m.ad[j]) / sk;
                    t.h_all[j] += mkj / sk;
                    t.h_death[j] += (1.0 - frac) * mkj / sk;
                    t.m_bar[j] += mkj / d;
                }
            }
            t
        })
        .collect();
    let thetas = ctx.thetas(beta);
    let n = ctx.samples.len();
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut out = Vec::with_capacity(hi - lo);
            let mut z = vec![0.0; w];
            for i in lo..hi {
                let mut u = vec![0.0; w];
                let sample = &ctx.samples[i];
                if let Some(last) = sample.last_risk_month() {
                    let x = &ctx.main[i * ctx.p..(i + 1) * ctx.p];
                    for t in 0..=last as usize {
                        let term = &terms[t];
                        if stats[t].deaths == 0 {
                            continue;
                        }
                        let eta: f64 = x.iter().zip(&thetas[t]).map(|(a, b)| a * b).sum();
                        let wgt = eta.exp();
                        ctx.row_into(i, t, &mut z);
                        let event_here = !sample.censored && sample.time as usize == t;
                        if event_here {
                            for j in 0..w {
                                u[j] += z[j] - term.m_bar[j]
                                    - wgt * (z[j] * term.g_death - term.h_death[j]);
                            }
                        } else {
                            for j in 0..w {
                                u[j] -= wgt * (z[j] * term.g_all - term.h_all[j]);
                            }
                        }
                    }
                }
                out.push(u);
            }
            out
        })
        .collect();
    partials.into_iter().flatten().collect()
}

/// Harrell-type concordance: over pairs where one loan has the strictly
/// earlier uncensored event, the fraction where the model assigns it the
/// higher risk score (score ties count one half).
pub fn concordance(model: &FittedHazardModel, samples: &[SurvivalSample]) -> Result<f64> {
    // Rank-compress scores for exact tie handling.
    let scores: Vec<f64> = samples.iter().map(|s| model.risk_score(&s.covariates)).collect();
    let mut sorted: Vec<f64> = scores.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank_of = |v: f64| sorted.partition_point(|x| *x < v);

    // Fenwick tree over score ranks of samples with observation time > t.
    let mut tree = vec![0u64; sorted.len() + 1];
    let mut count = 0u64;
    let add = |tree: &mut Vec<u64>, mut i: usize| {
        i += 1;
        while i < tree.len() {
            tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    };
    let prefix = |tree: &[u64], mut i: usize| -> u64 {
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    };

    let mut by_time: Vec<Vec<usize>> = vec![Vec::new(); MONTHS + 1];
    for (i, s) in samples.iter().enumerate() {
        by_time[s.time as usize].push(i);
    }
    let mut concordant = 0.0f64;
    let mut usable = 0u64;
    for t in (0..MONTHS).rev() {
        for &i in &by_time[t + 1] {
            add(&mut tree, rank_of(scores[i]));
            count += 1;
        }
        for &i in &by_time[t] {
            if samples[i].censored {
                continue;
            }
            if count == 0 {
                continue;
            }
            let r = rank_of(scores[i]);
            let below = prefix(&tree, r);
            let at = prefix(&tree, r + 1) - below;
            // Event loan must out-rank the survivors.
            concordant += below as f64 + 0.5 * at as f64;
            usable += count;
        }
    }
    if usable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(concordant / usable as f64)
}
