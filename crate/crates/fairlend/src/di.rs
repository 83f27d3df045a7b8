//! Funding-disparity estimation.
//!
//! The question: at equal repayment quality, are female borrowers funded at
//! a different rate than male borrowers? Quality is the realized return per
//! unit lent, `Y = lambda (1 + R)`, which is observed only for funded loans.
//! Unfunded (and right-censored) outcomes are filled in by simulating the
//! fitted hazard model, after which the disparity is measured three ways:
//!
//! * a nonparametric profile: fund-rate gap per return bin, aggregated with
//!   pooled bin weights;
//! * a linear probability model with a spline in the return, optionally with
//!   borrower controls pruned by grouped AIC elimination;
//! * the same regression with each loan's *expected* return substituted for
//!   a simulated draw, the shortcut estimator whose attenuation the
//!   sensitivity tooling quantifies.
//!
//! Intervals come from a nonparametric bootstrap that refits the hazard
//! model in every replicate, so first-stage noise propagates.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox::{fit, CoxConfig, FittedHazardModel};
use crate::data::{encode_survival, CovariateLayout, Gender, LoanRecord, PaymentStatus};
use crate::error::{Error, Result};
use crate::spline::SplineSpec;
use crate::stats::{percentile_interval, Gram};
use crate::stream::{stream, Domain};

/// Equal-width bins over the return axis; the last bin includes its upper
/// edge.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BinGrid {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

impl Default for BinGrid {
    fn default() -> Self {
        BinGrid {
            lower: 0.0,
            upper: 1.4,
            width: 0.02,
        }
    }
}

impl BinGrid {
    pub fn count(&self) -> usize {
        ((self.upper - self.lower) / self.width).round() as usize
    }

    /// Bin index of a value, `None` when outside the grid.
    pub fn index(&self, y: f64) -> Option<usize> {
        if y < self.lower || y > self.upper {
            return None;
        }
        let i = ((y - self.lower) / self.width).floor() as usize;
        Some(i.min(self.count() - 1))
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        (
            self.lower + self.width * i as f64,
            self.lower + self.width * (i + 1) as f64,
        )
    }

    /// Check the settings are usable; every consumer calls this first.
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !(self.upper > self.lower) {
            return Err(Error::InvalidConfig(format!(
                "bin grid [{}, {}] step {} is not increasing",
                self.lower, self.upper, self.width
            )));
        }
        Ok(())
    }
}

/// One return bin of the disparity profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapBin {
    pub lower: f64,
    pub upper: f64,
    pub female_rate: f64,
    pub male_rate: f64,
    pub female_n: usize,
    pub male_n: usize,
    /// Share of the pooled population landing here, renormalized over bins
    /// where both genders appear.
    pub weight: f64,
    /// `female_rate - male_rate`; negative means women are funded less
    /// often at this return level.
    pub gap: f64,
}

/// Binned fund-rate gap profile and its weighted aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapProfile {
    pub bins: Vec<GapBin>,
    /// Pooled-weight average of the per-bin gaps.
    pub aggregate: f64,
    /// Binomial plug-in standard error of the aggregate.
    pub se: f64,
    /// Population share excluded because a bin lacked one gender (or fell
    /// off the grid).
    pub excluded_share: f64,
    pub n_female: usize,
    pub n_male: usize,
}

/// A loan's contribution to the disparity profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReturnObservation {
    pub gender: Gender,
    /// Return per unit lent.
    pub y: f64,
    /// Funding decision under study.
    pub funded: bool,
}

/// Fund-rate gap per return bin, aggregated with pooled weights.
pub fn gap_profile(obs: &[ReturnObservation], grid: &BinGrid) -> Result<GapProfile> {
    grid.validate()?;
    if obs.is_empty() {
        return Err(Error::NoRecords);
    }
    let k = grid.count();
    // Per-bin tallies: [funded, total] per gender.
    let mut fem = vec![[0usize; 2]; k];
    let mut mal = vec![[0usize; 2]; k];
    for o in obs {
        let Some(i) = grid.index(o.y) else {
            continue;
        };
        let cell = match o.gender {
            Gender::Female => &mut fem[i],
            Gender::Male => &mut mal[i],
        };
        cell[0] += usize::from(o.funded);
        cell[1] += 1;
    }
    let mut used = 0usize;
    let mut bins = Vec::new();
    for i in 0..k {
        let (nf, nm) = (fem[i][1], mal[i][1]);
        if nf == 0 || nm == 0 {
            continue;
        }
        used += nf + nm;
        let (lower, upper) = grid.edges(i);
        let female_rate = fem[i][0] as f64 / nf as f64;
        let male_rate = mal[i][0] as f64 / nm as f64;
        bins.push(GapBin {
            lower,
            upper,
            female_rate,
            male_rate,
            female_n: nf,
            male_n: nm,
            weight: (nf + nm) as f64,
            gap: female_rate - male_rate,
        });
    }
    if bins.is_empty() {
        return Err(Error::SingleGender);
    }
    let mut aggregate = 0.0;
    let mut var = 0.0;
    for b in &mut bins {
        b.weight /= used as f64;
        aggregate += b.weight * b.gap;
        let vf = b.female_rate * (1.0 - b.female_rate) / b.female_n as f64;
        let vm = b.male_rate * (1.0 - b.male_rate) / b.male_n as f64;
        var += b.weight * b.weight * (vf + vm);
    }
    Ok(GapProfile {
        aggregate,
        se: var.sqrt(),
        excluded_share: (obs.len() - used) as f64 / obs.len() as f64,
        n_female: obs
            .iter()
            .filter(|o| o.gender == Gender::Female)
            .count(),
        n_male: obs.iter().filter(|o| o.gender == Gender::Male).count(),
        bins,
    })
}

/// One loan's resolved or simulated return.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImputedReturn {
    pub id: u64,
    pub gender: Gender,
    pub funded: bool,
    pub y: f64,
    pub defaulted: bool,
    /// True when the outcome was read off the payment history rather than
    /// simulated.
    pub observed: bool,
}

impl ImputedReturn {
    pub fn observation(&self) -> ReturnObservation {
        ReturnObservation {
            gender: self.gender,
            y: self.y,
            funded: self.funded,
        }
    }
}

/// Fill in every loan's return: observed outcomes pass through, censored
/// funded loans resume simulation at their cutoff month (multiplier 1),
/// unfunded loans are simulated from origination with `multiplier` scaling
/// each monthly hazard.
pub fn impute_returns(
    records: &[LoanRecord],
    model: &FittedHazardModel,
    layout: &CovariateLayout,
    multiplier: f64,
    rng: &mut impl Rng,
) -> Result<Vec<ImputedReturn>> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let raw = layout.row(r);
        let item = match &r.payments {
            Some(payments) => {
                let first_d = payments.iter().position(|p| *p == PaymentStatus::Defaulted);
                let first_u = payments
                    .iter()
                    .position(|p| *p == PaymentStatus::Unobserved);
                match (first_d, first_u) {
                    (Some(t), _) => {
                        let o = crate::data::RepaymentOutcome::from_default_month(
                            Some(t as u8),
                            r.rate,
                        );
                        ImputedReturn {
                            id: r.id,
                            gender: r.gender,
                            funded: true,
                            y: o.return_rate,
                            defaulted: true,
                            observed: true,
                        }
                    }
                    (None, Some(tau)) => {
                        // Right-censored: tau months stand, the rest are
                        // drawn at the model's own hazards.
                        let o = model.predict_repayment_scaled(&raw, r.rate, tau as u8, 1.0, rng);
                        ImputedReturn {
                            id: r.id,
                            gender: r.gender,
                            funded: true,
                            y: o.return_rate,
                            defaulted: o.default_month.is_some(),
                            observed: false,
                        }
                    }
                    (None, None) => ImputedReturn {
                        id: r.id,
                        gender: r.gender,
                        funded: true,
                        y: 1.0 + r.rate,
                        defaulted: false,
                        observed: true,
                    },
                }
            }
            None => {
                let o = model.predict_repayment_scaled(&raw, r.rate, 0, multiplier, rng);
                ImputedReturn {
                    id: r.id,
                    gender: r.gender,
                    funded: false,
                    y: o.return_rate,
                    defaulted: o.default_month.is_some(),
                    observed: false,
                }
            }
        };
        out.push(item);
    }
    Ok(out)
}

/// Which second-stage regression to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapRegression {
    /// Funding on gender and a return spline.
    Plain,
    /// Adds borrower controls, pruned by grouped AIC elimination.
    WithControls,
    /// Funding on gender and the pruned controls alone — the classic
    /// treatment test, which deliberately leaves the return rate out.
    Treatment,
}

/// Second-stage regression result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionGap {
    pub kind: GapRegression,
    /// Coefficient on the female indicator.
    pub gap: f64,
    pub se: f64,
    pub n: usize,
    pub aic: f64,
    pub kept_controls: Vec<String>,
    pub dropped_controls: Vec<String>,
}

struct GroupedDesign {
    gram: Gram,
    /// Column index of the female indicator.
    female: usize,
    /// Protected columns (always kept).
    protected: Vec<usize>,
    /// Candidate control groups, by label.
    groups: Vec<(String, Vec<usize>)>,
    n: usize,
}

/// Build the regression design: intercept, female, return spline, controls.
fn grouped_design(
    records: &[LoanRecord],
    layout: &CovariateLayout,
    ys: &[f64],
    with_controls: bool,
    return_df: usize,
) -> Result<GroupedDesign> {
    debug_assert_eq!(records.len(), ys.len());
    let n = records.len();
    let both = records.iter().any(|r| r.gender == Gender::Female)
        && records.iter().any(|r| r.gender == Gender::Male);
    if !both {
        return Err(Error::SingleGender);
    }

    // Return spline (linear fallback when the support is too thin).
    let y_spec = if return_df >= 2 {
        match SplineSpec::from_values(ys, return_df) {
            Ok(s) => Some(s),
            Err(Error::DegenerateKnots(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let y_lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let y_hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_cols = match &y_spec {
        Some(s) => s.dim(),
        None => usize::from(return_df >= 1 && y_hi > y_lo),
    };

    // Control columns: every layout slot except the gender indicator,
    // continuous ones expanded with splines, constants dropped.
    struct Control {
        label: String,
        slot: usize,
        spec: Option<SplineSpec>,
        center: f64,
        cols: usize,
    }
    let mut controls: Vec<Control> = Vec::new();
    if with_controls {
        for slot in 0..layout.width() {
            let name = &layout.names[slot];
            if name == "male" {
                continue;
            }
            let values: Vec<f64> = records.iter().map(|r| layout.row(r)[slot]).collect();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                continue;
            }
            if layout.continuous[slot] {
                match SplineSpec::from_values(&values, 4) {
                    Ok(spec) => {
                        let cols = spec.dim();
                        controls.push(Control {
                            label: name.clone(),
                            slot,
                            spec: Some(spec),
                            center: 0.0,
                            cols,
                        });
                        continue;
                    }
                    Err(Error::DegenerateKnots(_)) => {}
                    Err(e) => return Err(e),
                }
                let center = values.iter().sum::<f64>() / n as f64;
                controls.push(Control {
                    label: name.clone(),
                    slot,
                    spec: None,
                    center,
                    cols: 1,
                });
            } else {
                controls.push(Control {
                    label: name.clone(),
                    slot,
                    spec: None,
                    center: 0.0,
                    cols: 1,
                });
            }
        }
    }

    let width = 2 + y_cols + controls.iter().map(|c| c.cols).sum::<usize>();
    let mut gram = Gram::new(width);
    let mut row = vec![0.0; width];
    for (r, &y) in records.iter().zip(ys) {
        row[0] = 1.0;
        row[1] = f64::from(r.gender == Gender::Female);
        let mut at = 2;
        match &y_spec {
            Some(spec) => {
                spec.evaluate_into(y, &mut row[at..at + y_cols]);
                at += y_cols;
            }
            None if y_cols == 1 => {
                row[at] = y;
                at += 1;
            }
            None => {}
        }
        let raw = layout.row(r);
        for c in &controls {
            match &c.spec {
                Some(spec) => {
                    spec.evaluate_into(raw[c.slot], &mut row[at..at + c.cols]);
                }
                None => row[at] = raw[c.slot] - c.center,
            }
            at += c.cols;
        }
        debug_assert_eq!(at, width);
        gram.add_row(&row, f64::from(r.funded));
    }

    let mut protected: Vec<usize> = (0..2 + y_cols).collect();
    protected.sort_unstable();
    let mut groups = Vec::new();
    let mut at = 2 + y_cols;
    // Dummy families (employment_1..4 and friends) prune as one group.
    for c in &controls {
        let root = c
            .label
            .rsplit_once('_')
            .filter(|(_, tail)| tail.chars().all(|ch| ch.is_ascii_digit()))
            .map(|(head, _)| head.to_string())
            .unwrap_or_else(|| c.label.clone());
        let cols: Vec<usize> = (at..at + c.cols).collect();
        at += c.cols;
        match groups.last_mut() {
            Some((label, idx)) if *label == root => {
                let idx: &mut Vec<usize> = idx;
                idx.extend(cols);
            }
            _ => groups.push((root, cols)),
        }
    }
    Ok(GroupedDesign {
        gram,
        female: 1,
        protected,
        groups,
        n,
    })
}

/// Fit one of the second-stage regressions.
///
/// `ys` must align with `records`; the treatment design never reads the
/// values, the other kinds expect simulated or observed returns.
pub fn regression_gap(
    records: &[LoanRecord],
    layout: &CovariateLayout,
    ys: &[f64],
    kind: GapRegression,
) -> Result<RegressionGap> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let with_controls = kind != GapRegression::Plain;
    let return_df = if kind == GapRegression::Treatment { 0 } else { 4 };
    let design = grouped_design(records, layout, ys, with_controls, return_df)?;

    let mut kept: Vec<usize> = (0..design.groups.len()).collect();
    let column_set = |kept: &[usize]| -> Vec<usize> {
        let mut cols = design.protected.clone();
        for &g in kept {
            cols.extend(design.groups[g].1.iter().copied());
        }
        cols
    };
    let mut fit = design.gram.solve_subset(&column_set(&kept))?;
    let mut aic = fit.aic();
    loop {
        let mut best: Option<(usize, f64, crate::stats::OlsFit)> = None;
        for (pos, _) in kept.iter().enumerate() {
            let mut trial: Vec<usize> = kept.clone();
            trial.remove(pos);
            let Ok(candidate) = design.gram.solve_subset(&column_set(&trial)) else {
                continue;
            };
            let candidate_aic = candidate.aic();
            if candidate_aic < aic
                && best
                    .as_ref()
                    .is_none_or(|(_, b, _)| candidate_aic < *b)
            {
                best = Some((pos, candidate_aic, candidate));
            }
        }
        match best {
            Some((pos, best_aic, best_fit)) => {
                kept.remove(pos);
                fit = best_fit;
                aic = best_aic;
            }
            None => break,
        }
    }

    // Female sits at a fixed position inside the protected block.
    let female_pos = design
        .protected
        .iter()
        .position(|&c| c == design.female)
        .expect("female column is protected");
    let kept_controls: Vec<String> = kept
        .iter()
        .map(|&g| design.groups[g].0.clone())
        .collect();
    let dropped_controls: Vec<String> = (0..design.groups.len())
        .filter(|g| !kept.contains(g))
        .map(|g| design.groups[g].0.clone())
        .collect();
    Ok(RegressionGap {
        kind,
        gap: fit.coefficients[female_pos],
        se: fit.se(female_pos),
        n: design.n,
        aic,
        kept_controls,
        dropped_controls,
    })
}

/// Compute the aligned return vector a regression kind expects.
pub fn returns_for_regression(
    records: &[LoanRecord],
    model: &FittedHazardModel,
    layout: &CovariateLayout,
    kind: GapRegression,
    multiplier: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    match kind {
        GapRegression::Plain | GapRegression::WithControls => Ok(impute_returns(
            records, model, layout, multiplier, rng,
        )?
        .iter()
        .map(|i| i.y)
        .collect()),
        // The treatment design has no return column; hand back a placeholder
        // of the right length so callers stay uniform.
        GapRegression::Treatment => Ok(vec![0.0; records.len()]),
    }
}

/// Nonparametric disparity estimate from one imputation pass.
pub fn nonparametric_gap(
    records: &[LoanRecord],
    model: &FittedHazardModel,
    layout: &CovariateLayout,
    grid: &BinGrid,
    multiplier: f64,
    rng: &mut impl Rng,
) -> Result<GapProfile> {
    let imputed = impute_returns(records, model, layout, multiplier, rng)?;
    let obs: Vec<ReturnObservation> = imputed.iter().map(ImputedReturn::observation).collect();
    gap_profile(&obs, grid)
}

/// Bootstrap distribution of the nonparametric aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapGap {
    /// Full-sample point estimate.
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Two-sided level: `lower`/`upper` are the `alpha/2` and `1 - alpha/2`
    /// percentile ranks.
    pub alpha: f64,
    pub replicates: Vec<f64>,
    pub failed: usize,
}

/// Resample loans, refit the hazard model, re-impute, and re-aggregate.
///
/// Replicates failing to fit are dropped; more than 10% failures is an
/// error.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_gap(
    records: &[LoanRecord],
    layout: &CovariateLayout,
    config: &CoxConfig,
    grid: &BinGrid,
    multiplier: f64,
    seed: u64,
    n_replicates: usize,
    alpha: f64,
) -> Result<BootstrapGap> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    if n_replicates < 2 {
        return Err(Error::InvalidConfig(
            "bootstrap needs at least two replicates".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "bootstrap level {alpha} out of (0, 1)"
        )));
    }
    let funded: Vec<LoanRecord> = records.iter().filter(|r| r.funded).cloned().collect();
    let samples = encode_survival(&funded, layout)?;
    let model = fit(&samples, layout, config)?;
    let mut rng = stream(seed, Domain::Impute, 0);
    let estimate = nonparametric_gap(records, &model, layout, grid, multiplier, &mut rng)?
        .aggregate;

    let results: Vec<Result<f64>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Domain::Bootstrap, r as u64);
            let resampled: Vec<LoanRecord> = (0..records.len())
                .map(|_| records[rng.gen_range(0..records.len())].clone())
                .collect();
            let funded: Vec<LoanRecord> =
                resampled.iter().filter(|x| x.funded).cloned().collect();
            let samples = encode_survival(&funded, layout)?;
            let model = fit(&samples, layout, config)?;
            Ok(nonparametric_gap(&resampled, &model, layout, grid, multiplier, &mut rng)?
                .aggregate)
        })
        .collect();
    let mut replicates = Vec::with_capacity(n_replicates);
    let mut failed = 0usize;
    for r in results {
        match r {
            Ok(v) => replicates.push(v),
            Err(_) => failed += 1,
        }
    }
    if failed * 10 > n_replicates {
        return Err(Error::BootstrapFailures {
            failed,
            total: n_replicates,
        });
    }
    let (lower, upper) = percentile_interval(&replicates, alpha);
    Ok(BootstrapGap {
        estimate,
        lower,
        upper,
        alpha,
        replicates,
        failed,
    })
}

/// Comparison operator of one filter clause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Conjunction of `field op value` clauses, e.g. `"married==1 & age<30"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetFilter {
    clauses: Vec<(String, FilterOp, f64)>,
}

impl std::str::FromStr for SubsetFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<SubsetFilter> {
        let mut clauses = Vec::new();
        for part in s.split('&') {
            let part = part.trim();
            if part.is_empty() {
                return Err(Error::InvalidConfig(format!("empty clause in `{s}`")));
            }
            let (op_at, op, len) = ["<=", ">=", "==", "!=", "<", ">"]
                .iter()
                .filter_map(|op| part.find(op).map(|at| (at, *op, op.len())))
                .min_by_key(|(at, _, len)| (*at, std::cmp::Reverse(*len)))
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("no comparison operator in `{part}`"))
                })?;
            let field = part[..op_at].trim().to_string();
            let value: f64 = part[op_at + len..].trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("bad numeric literal in `{part}`"))
            })?;
            let op = match op {
                "==" => FilterOp::Eq,
                "!=" => FilterOp::Ne,
                "<" => FilterOp::Lt,
                "<=" => FilterOp::Le,
                ">" => FilterOp::Gt,
                ">=" => FilterOp::Ge,
                _ => unreachable!(),
            };
            // Validate the field name against a probe record up front.
            if LoanRecord::probe().field(&field).is_none() {
                return Err(Error::InvalidConfig(format!("unknown field `{field}`")));
            }
            clauses.push((field, op, value));
        }
        Ok(SubsetFilter { clauses })
    }
}

impl SubsetFilter {
    pub fn matches(&self, r: &LoanRecord) -> bool {
        self.clauses.iter().all(|(field, op, value)| {
            let v = r.field(field).unwrap_or(f64::NAN);
            match op {
                FilterOp::Eq => v == *value,
                FilterOp::Ne => v != *value,
                FilterOp::Lt => v < *value,
                FilterOp::Le => v <= *value,
                FilterOp::Gt => v > *value,
                FilterOp::Ge => v >= *value,
            }
        })
    }
}

/// Disparity within one labeled subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetGap {
    pub label: String,
    pub n: usize,
    pub aggregate: f64,
    pub se: f64,
}

/// Profile the disparity within labeled subpopulations; the hazard model
/// stays global, only the comparison population shrinks.
pub fn disaggregate_gap(
    records: &[LoanRecord],
    model: &FittedHazardModel,
    layout: &CovariateLayout,
    grid: &BinGrid,
    subsets: &[(String, SubsetFilter)],
    multiplier: f64,
    seed: u64,
) -> Result<Vec<SubsetGap>> {
    let mut out = Vec::with_capacity(subsets.len());
    for (i, (label, filter)) in subsets.iter().enumerate() {
        let subset: Vec<LoanRecord> = records
            .iter()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect();
        let mut rng = stream(seed, Domain::Impute, 1 + i as u64);
        let profile = nonparametric_gap(&subset, model, layout, grid, multiplier, &mut rng)?;
        out.push(SubsetGap {
            label: label.clone(),
            n: subset.len(),
            aggregate: profile.aggregate,
            se: profile.se,
        });
    }
    Ok(out)
}

/// One multiplier's averaged disparity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub multiplier: f64,
    /// Aggregate gap averaged over the imputation draws.
    pub gap: f64,
    /// Spread of the draws (standard error of their mean).
    pub se: f64,
}

/// Sensitivity of the disparity to scaled unfunded-loan hazards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub points: Vec<SensitivityPoint>,
    pub draws: usize,
    /// Least-squares line through the points.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Multiplier where the fitted line crosses zero, when the slope is
    /// meaningfully nonzero.
    pub zero_crossing: Option<f64>,
}

/// Sweep the unfunded-hazard multiplier and extrapolate the sign change.
pub fn sensitivity_sweep(
    records: &[LoanRecord],
    model: &FittedHazardModel,
    layout: &CovariateLayout,
    grid: &BinGrid,
    multipliers: &[f64],
    draws: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    if multipliers.len() < 2 {
        return Err(Error::InvalidConfig(
            "sensitivity sweep needs at least two multipliers".into(),
        ));
    }
    if draws == 0 {
        return Err(Error::InvalidConfig("sensitivity needs draws >= 1".into()));
    }
    let mut points = Vec::with_capacity(multipliers.len());
    for (mi, &m) in multipliers.iter().enumerate() {
        if !(m >= 0.0) {
            return Err(Error::InvalidConfig(format!("negative multiplier {m}")));
        }
        let aggregates: Vec<Result<f64>> = (0..draws)
            .into_par_iter()
            .map(|d| {
                let mut rng = stream(seed, Domain::Impute, 1000 + (mi * draws + d) as u64);
                Ok(nonparametric_gap(records, model, layout, grid, m, &mut rng)?.aggregate)
            })
            .collect();
        let values: Vec<f64> = aggregates.into_iter().collect::<Result<_>>()?;
        let mean = crate::stats::mean(&values);
        let sd = crate::stats::population_sd(&values);
        points.push(SensitivityPoint {
            multiplier: m,
            gap: mean,
            se: if draws > 1 {
                sd / ((draws - 1) as f64).sqrt()
            } else {
                0.0
            },
        });
    }
    // Least-squares line gap ~ a + b m over the sweep.
    let xs: Vec<f64> = points.iter().map(|p| p.multiplier).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.gap).collect();
    let xbar = crate::stats::mean(&xs);
    let ybar = crate::stats::mean(&ys);
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let syy: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidConfig(
            "sensitivity multipliers must not be identical".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let r_squared = if syy > 0.0 {
        (sxy * sxy) / (sxx * syy)
    } else {
        1.0
    };
    let zero_crossing = (slope.abs() > 1e-12).then(|| -intercept / slope);
    Ok(SensitivityReport {
        points,
        draws,
        slope,
        intercept,
        r_squared,
        zero_crossing,
    })
}
