//! Model adequacy checks for fitted hazard models.
//!
//! Three complementary views:
//!
//! * **Proportionality drift.** Schoenfeld residuals (one per default event)
//!   regressed on the event month. Flat means the log hazard ratio is stable
//!   over the loan term; the chi-square tests quantify drift per coefficient
//!   block and globally.
//! * **Calibration.** Cox-Snell style residuals: the cumulative hazard each
//!   loan accumulated before leaving observation. For a well-specified model
//!   their Nelson-Aalen cumulative hazard hugs the 45-degree line.
//! * **Discrimination.** Where defaulting loans sit in the risk-score
//!   ranking of their month's risk set; above one half means the model
//!   orders defaults ahead of survivors.

use serde::{Deserialize, Serialize};

use crate::cox::{efron_derivatives, month_stats, FittedHazardModel, MONTHS};
use crate::data::SurvivalSample;
use crate::error::{Error, Result};
use crate::stats::{chi_squared_sf, local_linear, SmoothPoint};

/// One chi-square drift test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftTest {
    pub label: String,
    pub chi_squared: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Smoothed scaled-residual path for one parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterCurve {
    pub name: String,
    /// Fitted coefficient, the level a flat curve should sit at.
    pub reference: f64,
    pub points: Vec<SmoothPoint>,
}

/// Proportionality report: drift tests plus smoothed coefficient paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProportionalityReport {
    pub parameter_names: Vec<String>,
    /// One test per coefficient block (a raw covariate's expanded columns,
    /// or one interaction group).
    pub blocks: Vec<DriftTest>,
    pub global: DriftTest,
    pub curves: Vec<ParameterCurve>,
    pub n_events: usize,
}

/// A raw Schoenfeld residual: observed minus risk-set-expected covariates
/// at one default event.
pub(crate) struct EventResidual {
    pub month: u8,
    pub values: Vec<f64>,
}

/// Raw Schoenfeld residuals at the fitted coefficients, in deterministic
/// (month, sample index) order, together with the per-month risk-set means.
pub(crate) fn raw_schoenfeld(
    model: &FittedHazardModel,
    samples: &[SurvivalSample],
) -> Result<(Vec<EventResidual>, Vec<f64>)> {
    let ctx = model.context(samples)?;
    let w = ctx.width();
    let mut beta = model.beta_main.clone();
    beta.extend_from_slice(&model.beta_time);
    let stats = month_stats(&ctx, &beta);

    // Tie-adjusted risk-set means per event month.
    let mut means: Vec<Option<Vec<f64>>> = vec![None; MONTHS];
    for (t, m) in stats.iter().enumerate() {
        if m.deaths == 0 {
            continue;
        }
        let d = m.deaths as f64;
        let mut mbar = vec![0.0; w];
        for k in 0..m.deaths {
            let frac = k as f64 / d;
            let sk = m.s - frac * m.sd;
            for j in 0..w {
                mbar[j] += (m.a[j] - frac * m.ad[j]) / sk / d;
            }
        }
        means[t] = Some(mbar);
    }

    let mut residuals = Vec::new();
    let mut z = vec![0.0; w];
    for t in 0..MONTHS {
        let Some(mbar) = &means[t] else { continue };
        for (i, s) in samples.iter().enumerate() {
            if s.censored || s.time as usize != t {
                continue;
            }
            ctx.row_into(i, t, &mut z);
            residuals.push(EventResidual {
                month: t as u8,
                values: z.iter().zip(mbar).map(|(a, b)| a - b).collect(),
            });
        }
    }
    if residuals.is_empty() {
        return Err(Error::NoEvents);
    }
    let info = {
        let (_, _, info) = efron_derivatives(&stats, w);
        info
    };
    Ok((residuals, info))
}

/// Parameter blocks for the per-block drift tests: main columns grouped by
/// their raw source covariate, then one block per interaction group.
fn parameter_blocks(model: &FittedHazardModel) -> Vec<(String, Vec<usize>)> {
    use crate::cox::ColumnDef;
    let mut blocks: Vec<(String, Vec<usize>)> = Vec::new();
    for (j, col) in model.columns.iter().enumerate() {
        let source = match col.def {
            ColumnDef::Raw { source }
            | ColumnDef::Linear { source, .. }
            | ColumnDef::Spline { source, .. } => source,
        };
        let label = model.raw_names[source].clone();
        match blocks.last_mut() {
            Some((l, idx)) if *l == label => idx.push(j),
            _ => blocks.push((label, vec![j])),
        }
    }
    let p = model.columns.len();
    let q = model
        .time_spec
        .as_ref()
        .map_or(0, crate::spline::SplineSpec::dim);
    for (a, &c) in model.interaction_columns.iter().enumerate() {
        let label = format!("{}:t", model.columns[c].name);
        blocks.push((label, (0..q).map(|b| p + a * q + b).collect()));
    }
    blocks
}

/// Drift (proportionality) tests with the month as the time transform.
pub fn schoenfeld_drift(
    model: &FittedHazardModel,
    samples: &[SurvivalSample],
) -> Result<ProportionalityReport> {
    let (residuals, info) = raw_schoenfeld(model, samples)?;
    let w = residuals[0].values.len();
    let m = residuals.len();
    let g_bar = residuals.iter().map(|r| f64::from(r.month)).sum::<f64>() / m as f64;
    let g_ss: f64 = residuals
        .iter()
        .map(|r| (f64::from(r.month) - g_bar).powi(2))
        .sum();
    if g_ss <= 0.0 {
        // Every event in the same month: drift is not identified.
        return Err(Error::ResidualsUndefined);
    }
    // u = sum_i (g_i - gbar) s_i
    let mut u = vec![0.0; w];
    for r in &residuals {
        let c = f64::from(r.month) - g_bar;
        for (uj, v) in u.iter_mut().zip(&r.values) {
            *uj += c * v;
        }
    }
    let vinv = &model.naive_covariance; // inverse information at the fit
    debug_assert_eq!(vinv.dim, w);

    // Global statistic: m u' I^{-1} u / g_ss.
    let mut quad = 0.0;
    for i in 0..w {
        for j in 0..w {
            quad += u[i] * vinv.get(i, j) * u[j];
        }
    }
    let global_t = (m as f64) * quad / g_ss;
    let global = DriftTest {
        label: "global".into(),
        chi_squared: global_t,
        df: w,
        p_value: chi_squared_sf(global_t, w as f64),
    };

    // Per-block: m u_B' (W_BB)^{-1} u_B / g_ss with W the inverse
    // information.
    let names = model.parameter_names();
    let mut blocks = Vec::new();
    for (label, idx) in parameter_blocks(model) {
        let b = idx.len();
        let mut wbb = nalgebra::DMatrix::zeros(b, b);
        let mut ub = nalgebra::DVector::zeros(b);
        for (r, &i) in idx.iter().enumerate() {
            ub[r] = u[i];
            for (c, &j) in idx.iter().enumerate() {
                wbb[(r, c)] = vinv.get(i, j);
            }
        }
        let chol = nalgebra::Cholesky::new(wbb).ok_or_else(|| {
            Error::RankDeficient(names.get(idx[0]).cloned().unwrap_or_default())
        })?;
        let solved = chol.solve(&ub);
        let t = (m as f64) * ub.dot(&solved) / g_ss;
        blocks.push(DriftTest {
            label,
            chi_squared: t,
            df: b,
            p_value: chi_squared_sf(t, b as f64),
        });
    }

    // Smoothed scaled residuals: s* = m I^{-1} s + beta, an estimate of the
    // coefficient path over the term.
    let mut beta = model.beta_main.clone();
    beta.extend_from_slice(&model.beta_time);
    let months: Vec<f64> = residuals.iter().map(|r| f64::from(r.month)).collect();
    let lo = months.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = months.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bandwidth = (0.2 * (hi - lo)).max(1.0);
    let grid: Vec<f64> = (0..MONTHS).map(|t| t as f64).collect();
    let mut curves = Vec::with_capacity(w);
    for j in 0..w {
        let scaled: Vec<f64> = residuals
            .iter()
            .map(|r| {
                let mut v = 0.0;
                for (i, ri) in r.values.iter().enumerate() {
                    v += vinv.get(j, i) * ri;
                }
                m as f64 * v + beta[j]
            })
            .collect();
        curves.push(ParameterCurve {
            name: names[j].clone(),
            reference: beta[j],
            points: local_linear(&months, &scaled, &grid, bandwidth)?,
        });
    }
    let _ = info;
    Ok(ProportionalityReport {
        parameter_names: names,
        blocks,
        global,
        curves,
        n_events: m,
    })
}

/// One point of the residual calibration curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationPoint {
    /// Accumulated model hazard of a loan that defaulted here.
    pub residual: f64,
    /// Nelson-Aalen cumulative hazard of the residual sample at this value.
    pub cumulative: f64,
}

/// Cox-Snell style calibration report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub points: Vec<CalibrationPoint>,
    /// Largest |cumulative - residual| over the central quantile range.
    pub max_deviation: f64,
    /// Residual values bounding the comparison window.
    pub quantile_range: (f64, f64),
    pub n_events: usize,
}

/// Nelson-Aalen estimator over (value, event) pairs; returns the cumulative
/// hazard at each distinct event value, ascending.
pub(crate) fn nelson_aalen(data: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, bool)> = data.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut out = Vec::new();
    let mut cum = 0.0;
    let mut i = 0;
    while i < n {
        let v = sorted[i].0;
        let mut j = i;
        let mut deaths = 0usize;
        while j < n && sorted[j].0 == v {
            deaths += usize::from(sorted[j].1);
            j += 1;
        }
        let at_risk = n - i;
        if deaths > 0 {
            cum += deaths as f64 / at_risk as f64;
            out.push((v, cum));
        }
        i = j;
    }
    out
}

/// Accumulated-hazard residuals and their calibration curve.
pub fn cox_snell(
    model: &FittedHazardModel,
    samples: &[SurvivalSample],
) -> Result<CalibrationReport> {
    if samples.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut data = Vec::with_capacity(samples.len());
    let mut n_events = 0usize;
    for s in samples {
        let hazards = model.monthly_hazards(&s.covariates);
        // Trials experienced: through the event month inclusive, or the
        // months survived when censored.
        let upto = if s.censored {
            s.time as usize
        } else {
            s.time as usize + 1
        };
        let residual: f64 = hazards[..upto].iter().sum();
        n_events += usize::from(!s.censored);
        data.push((residual, !s.censored));
    }
    if n_events == 0 {
        return Err(Error::NoEvents);
    }
    let curve = nelson_aalen(&data);
    let mut values: Vec<f64> = data.iter().map(|d| d.0).collect();
    values.sort_by(f64::total_cmp);
    let lo = crate::stats::quantile_sorted(&values, 0.05);
    let hi = crate::stats::quantile_sorted(&values, 0.95);
    let max_deviation = curve
        .iter()
        .filter(|(v, _)| *v >= lo && *v <= hi)
        .map(|(v, c)| (c - v).abs())
        .fold(0.0, f64::max);
    Ok(CalibrationReport {
        points: curve
            .into_iter()
            .map(|(residual, cumulative)| CalibrationPoint {
                residual,
                cumulative,
            })
            .collect(),
        max_deviation,
        quantile_range: (lo, hi),
        n_events,
    })
}

/// Rank summary for one month.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankSummary {
    pub month: u8,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub events: usize,
}

/// Percentile ranks of defaulting loans within their month's risk set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub monthly: Vec<RankSummary>,
    /// Mean rank over all defaults; 0.5 is chance level.
    pub overall: f64,
    pub n_events: usize,
}

/// Where defaults sit in the risk-score ordering of their risk set.
pub fn default_ranks(model: &FittedHazardModel, samples: &[SurvivalSample]) -> Result<RankReport> {
    let scores: Vec<f64> = samples
        .iter()
        .map(|s| model.risk_score(&s.covariates))
        .collect();
    let mut monthly = Vec::new();
    let mut all_ranks = Vec::new();
    for t in 0..MONTHS as u8 {
        let risk: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].last_risk_month().is_some_and(|l| l >= t))
            .collect();
        if risk.len() < 2 {
            continue;
        }
        let mut risk_scores: Vec<f64> = risk.iter().map(|&i| scores[i]).collect();
        risk_scores.sort_by(f64::total_cmp);
        let mut ranks = Vec::new();
        for &i in &risk {
            if samples[i].censored || samples[i].time != t {
                continue;
            }
            let below = risk_scores.partition_point(|v| *v < scores[i]);
            let upto = risk_scores.partition_point(|v| *v <= scores[i]);
            let ties_excl_self = (upto - below - 1) as f64;
            let rank = (below as f64 + 0.5 * ties_excl_self) / (risk.len() - 1) as f64;
            ranks.push(rank);
        }
        if ranks.is_empty() {
            continue;
        }
        let mean = crate::stats::mean(&ranks);
        let sd = crate::stats::population_sd(&ranks);
        let half = 1.96 * sd / (ranks.len() as f64).sqrt();
        monthly.push(RankSummary {
            month: t,
            mean,
            lower: mean - half,
            upper: mean + half,
            events: ranks.len(),
        });
        all_ranks.extend(ranks);
    }
    if all_ranks.is_empty() {
        return Err(Error::NoEvents);
    }
    Ok(RankReport {
        overall: crate::stats::mean(&all_ranks),
        n_events: all_ranks.len(),
        monthly,
    })
}
