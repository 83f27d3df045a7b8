//! Loan records, repayment outcomes, preprocessing, and the survival encoding.
//!
//! A loan runs for 12 monthly installments. Month indices are 0-based:
//! `payments[t]` is the status of installment `t + 1`. The default month `T`
//! is the first month with a missed installment; a loan that survives all 12
//! months has `T = 12+` (represented as `None`). The repayment ratio is
//! `lambda = min(T, 12) / 12` and the realized gross return per unit lent is
//! `Y = lambda * (1 + R)` for contract rate `R`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::order_quantile_sorted;

/// Borrower gender as recorded by the platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Female => "f",
            Gender::Male => "m",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s {
            "f" | "F" => Some(Gender::Female),
            "m" | "M" => Some(Gender::Male),
            _ => None,
        }
    }
}

/// One value per gender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderPair<T> {
    pub female: T,
    pub male: T,
}

impl<T> GenderPair<T> {
    pub fn new(female: T, male: T) -> GenderPair<T> {
        GenderPair { female, male }
    }

    pub fn get(&self, g: Gender) -> &T {
        match g {
            Gender::Female => &self.female,
            Gender::Male => &self.male,
        }
    }

    pub fn get_mut(&mut self, g: Gender) -> &mut T {
        match g {
            Gender::Female => &mut self.female,
            Gender::Male => &mut self.male,
        }
    }
}

impl<T: Copy> GenderPair<T> {
    pub fn value(&self, g: Gender) -> T {
        *self.get(g)
    }
}

impl<T: Clone> GenderPair<T> {
    /// The same value for both genders.
    pub fn uniform(v: T) -> GenderPair<T> {
        GenderPair {
            female: v.clone(),
            male: v,
        }
    }
}

/// Observed status of one monthly installment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PaymentStatus {
    Paid,
    Defaulted,
    Unobserved,
}

impl PaymentStatus {
    pub fn code(self) -> &'static str {
        match self {
            PaymentStatus::Paid => "P",
            PaymentStatus::Defaulted => "D",
            PaymentStatus::Unobserved => "U",
        }
    }

    pub fn parse(s: &str) -> Option<PaymentStatus> {
        match s {
            "P" => Some(PaymentStatus::Paid),
            "D" => Some(PaymentStatus::Defaulted),
            "U" => Some(PaymentStatus::Unobserved),
            _ => None,
        }
    }
}

/// One loan application as it appears in the input data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanRecord {
    pub id: u64,
    pub gender: Gender,
    pub married: bool,
    /// Age in years.
    pub age: f64,
    /// Repeat borrower on the platform.
    pub repeated: bool,
    /// Employment category, 0 (reference) through 4.
    pub employment: u8,
    /// Education category, 0 (reference) through 4.
    pub education: u8,
    pub past_failed: f64,
    pub past_aborted: f64,
    pub past_ontime: f64,
    pub past_late: f64,
    /// Loan size in thousands.
    pub amount: f64,
    /// Annualized contract interest rate as a fraction.
    pub rate: f64,
    /// Applied through the mobile app.
    pub app: bool,
    /// Express-listing flag.
    pub express: bool,
    /// Province category, 0 (reference) upward.
    pub province: u8,
    /// Funded by investors. Payment history exists if and only if funded.
    pub funded: bool,
    pub payments: Option<[PaymentStatus; 12]>,
}

impl LoanRecord {
    /// All-zero record used to validate field names before any data exists.
    pub(crate) fn probe() -> LoanRecord {
        LoanRecord {
            id: 0,
            gender: Gender::Female,
            married: false,
            age: 0.0,
            repeated: false,
            employment: 0,
            education: 0,
            past_failed: 0.0,
            past_aborted: 0.0,
            past_ontime: 0.0,
            past_late: 0.0,
            amount: 0.0,
            rate: 0.0,
            app: false,
            express: false,
            province: 0,
            funded: false,
            payments: None,
        }
    }

    /// Numeric view of a named field, used by subset filters and market
    /// rules. Indicator fields map to 0/1.
    pub fn field(&self, name: &str) -> Option<f64> {
        Some(match name {
            "male" => f64::from(self.gender == Gender::Male),
            "married" => f64::from(self.married),
            "age" => self.age,
            "repeated" => f64::from(self.repeated),
            "employment" => f64::from(self.employment),
            "education" => f64::from(self.education),
            "past_failed" => self.past_failed,
            "past_aborted" => self.past_aborted,
            "past_ontime" => self.past_ontime,
            "past_late" => self.past_late,
            "amount" => self.amount,
            "rate" => self.rate,
            "app" => f64::from(self.app),
            "express" => f64::from(self.express),
            "province" => f64::from(self.province),
            "funded" => f64::from(self.funded),
            _ => return None,
        })
    }
}

/// Resolved repayment of one funded, fully observed loan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepaymentOutcome {
    /// First defaulted month (0-based); `None` when all 12 months were paid.
    pub default_month: Option<u8>,
    /// `min(T, 12) / 12`.
    pub repayment_ratio: f64,
    /// `repayment_ratio * (1 + rate)`.
    pub return_rate: f64,
}

impl RepaymentOutcome {
    /// Build the outcome from a known default month and contract rate.
    pub fn from_default_month(default_month: Option<u8>, rate: f64) -> RepaymentOutcome {
        let t = default_month.map(|m| m as f64).unwrap_or(12.0);
        let lambda = (t.min(12.0)) / 12.0;
        RepaymentOutcome {
            default_month,
            repayment_ratio: lambda,
            return_rate: lambda * (1.0 + rate),
        }
    }
}

/// Resolve the repayment outcome of a funded loan.
///
/// Errors when the loan is unfunded, when the history is right-censored
/// before either a default or month 12, or when the history violates the
/// monotone default convention (a payment after a default).
pub fn derive_outcome(record: &LoanRecord) -> Result<RepaymentOutcome> {
    let payments = record.payments.as_ref().ok_or(Error::MalformedPayments {
        id: record.id,
        message: "unfunded loan has no repayment outcome".into(),
    })?;
    let mut first_default = None;
    let mut first_unobserved = None;
    for (t, &p) in payments.iter().enumerate() {
        match p {
            PaymentStatus::Defaulted if first_default.is_none() => first_default = Some(t as u8),
            PaymentStatus::Paid if first_default.is_some() => {
                return Err(Error::MalformedPayments {
                    id: record.id,
                    message: format!("payment in month {t} after default"),
                })
            }
            PaymentStatus::Paid if first_unobserved.is_some() => {
                return Err(Error::MalformedPayments {
                    id: record.id,
                    message: format!("payment in month {t} after an unobserved month"),
                })
            }
            PaymentStatus::Unobserved if first_unobserved.is_none() => {
                first_unobserved = Some(t as u8)
            }
            _ => {}
        }
    }
    match (first_default, first_unobserved) {
        // A default is resolving even if later months are unobserved.
        (Some(t), gap) if gap.is_none() || gap.unwrap() > t => {
            Ok(RepaymentOutcome::from_default_month(Some(t), record.rate))
        }
        (None, None) => Ok(RepaymentOutcome::from_default_month(None, record.rate)),
        _ => Err(Error::CensoredOutcome { id: record.id }),
    }
}

/// One loan in counting-process form: observation month and censoring flag.
///
/// A defaulted loan has `time = T` and `censored = false`; it was at risk in
/// months `0..=T`. A censored loan observed paid through `time` months was at
/// risk in months `0..time`. Full repayment is `time = 12, censored = true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSample {
    /// Expanded numeric covariates, per [`CovariateLayout`].
    pub covariates: Vec<f64>,
    pub time: u8,
    pub censored: bool,
    pub gender: Gender,
}

impl SurvivalSample {
    /// Last month in which this sample sits in a risk set, or `None` when it
    /// was never at risk (zero observed months).
    pub fn last_risk_month(&self) -> Option<u8> {
        if self.censored {
            if self.time == 0 {
                None
            } else {
                Some(self.time - 1)
            }
        } else {
            Some(self.time)
        }
    }
}

/// Names and kinds of the expanded covariate columns shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateLayout {
    pub names: Vec<String>,
    /// Columns eligible for spline expansion (continuous measurements).
    pub continuous: Vec<bool>,
    /// Number of distinct province categories seen in the data.
    pub provinces: u8,
}

const BINARY_COLUMNS: [&str; 5] = ["male", "married", "repeated", "app", "express"];
const CONTINUOUS_COLUMNS: [&str; 7] = [
    "age",
    "past_failed",
    "past_aborted",
    "past_ontime",
    "past_late",
    "amount",
    "rate",
];

impl CovariateLayout {
    /// Build the layout from the full data set (funded and unfunded), so the
    /// same expansion serves fitting and imputation. Categories use level 0
    /// as the reference cell.
    pub fn from_records(records: &[LoanRecord]) -> Result<CovariateLayout> {
        if records.is_empty() {
            return Err(Error::NoRecords);
        }
        let provinces = records.iter().map(|r| r.province).max().unwrap_or(0) + 1;
        let mut names: Vec<String> = BINARY_COLUMNS.iter().map(|s| s.to_string()).collect();
        let mut continuous = vec![false; BINARY_COLUMNS.len()];
        for level in 1..=4u8 {
            names.push(format!("employment_{level}"));
            continuous.push(false);
        }
        for level in 1..=4u8 {
            names.push(format!("education_{level}"));
            continuous.push(false);
        }
        for level in 1..provinces {
            names.push(format!("province_{level}"));
            continuous.push(false);
        }
        for name in CONTINUOUS_COLUMNS {
            names.push(name.to_string());
            continuous.push(true);
        }
        Ok(CovariateLayout {
            names,
            continuous,
            provinces,
        })
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    /// Expand one record into its covariate row.
    pub fn row(&self, r: &LoanRecord) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.width());
        row.push((r.gender == Gender::Male) as u8 as f64);
        row.push(r.married as u8 as f64);
        row.push(r.repeated as u8 as f64);
        row.push(r.app as u8 as f64);
        row.push(r.express as u8 as f64);
        for level in 1..=4u8 {
            row.push((r.employment == level) as u8 as f64);
        }
        for level in 1..=4u8 {
            row.push((r.education == level) as u8 as f64);
        }
        for level in 1..self.provinces {
            row.push((r.province == level) as u8 as f64);
        }
        row.push(r.age);
        row.push(r.past_failed);
        row.push(r.past_aborted);
        row.push(r.past_ontime);
        row.push(r.past_late);
        row.push(r.amount);
        row.push(r.rate);
        debug_assert_eq!(row.len(), self.width());
        row
    }
}

/// Encode funded loans into survival samples under `layout`.
///
/// Histories must already be normalized (see [`preprocess`]): observed months
/// form a prefix, and nothing is observed after a default.
pub fn encode_survival(records: &[LoanRecord], layout: &CovariateLayout) -> Result<Vec<SurvivalSample>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let payments = r.payments.as_ref().ok_or(Error::MalformedPayments {
            id: r.id,
            message: "cannot encode an unfunded loan".into(),
        })?;
        let mut time = 12u8;
        let mut censored = true;
        for (t, &p) in payments.iter().enumerate() {
            match p {
                PaymentStatus::Paid => {}
                PaymentStatus::Defaulted => {
                    time = t as u8;
                    censored = false;
                    break;
                }
                PaymentStatus::Unobserved => {
                    time = t as u8;
                    censored = true;
                    break;
                }
            }
        }
        out.push(SurvivalSample {
            covariates: layout.row(r),
            time,
            censored,
            gender: r.gender,
        });
    }
    Ok(out)
}

/// What to do with observations outside the winsorization bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WinsorMode {
    /// Clamp to the bounds (the default).
    Clamp,
    /// Drop the whole record.
    Drop,
}

/// Cleaning configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Two-sided winsorization quantile `q`; bounds are the `[q, 1-q]`
    /// order-statistic quantiles pooled over genders. Zero disables.
    pub winsor_quantile: f64,
    pub winsor_mode: WinsorMode,
    /// Loans with a contract rate strictly below this are dropped.
    pub rate_floor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            winsor_quantile: 0.005,
            winsor_mode: WinsorMode::Clamp,
            rate_floor: 0.16,
        }
    }
}

/// Disposition counts from one [`preprocess`] pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub input: usize,
    pub kept: usize,
    /// Histories with a payment after a default, dropped outright.
    pub pay_after_default: usize,
    /// Funded histories with an interior gap, right-censored at the gap.
    pub truncated_histories: usize,
    /// Records dropped by `WinsorMode::Drop`.
    pub winsor_outliers: usize,
    pub below_rate_floor: usize,
}

const WINSOR_COLUMNS: [&str; 6] = [
    "amount",
    "age",
    "past_ontime",
    "past_late",
    "past_failed",
    "past_aborted",
];

fn winsor_field<'a>(r: &'a mut LoanRecord, name: &str) -> &'a mut f64 {
    match name {
        "amount" => &mut r.amount,
        "age" => &mut r.age,
        "past_ontime" => &mut r.past_ontime,
        "past_late" => &mut r.past_late,
        "past_failed" => &mut r.past_failed,
        "past_aborted" => &mut r.past_aborted,
        _ => unreachable!("not a winsorized column"),
    }
}

/// Clean a raw record set: normalize payment histories, winsorize the heavy-
/// tailed covariates, and apply the rate floor. With `WinsorMode::Clamp` the
/// pass is idempotent.
pub fn preprocess(
    records: Vec<LoanRecord>,
    config: &PreprocessConfig,
) -> Result<(Vec<LoanRecord>, DropReport)> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    if !(0.0..0.5).contains(&config.winsor_quantile) {
        return Err(Error::InvalidConfig(format!(
            "winsor quantile must be in [0, 0.5), got {}",
            config.winsor_quantile
        )));
    }
    let mut report = DropReport {
        input: records.len(),
        ..DropReport::default()
    };

    // Payment-history normalization.
    let mut kept: Vec<LoanRecord> = Vec::with_capacity(records.len());
    for mut r in records {
        if let Some(p) = r.payments.as_mut() {
            let first_default = p.iter().position(|s| *s == PaymentStatus::Defaulted);
            if let Some(d) = first_default {
                if p[d..].iter().any(|s| *s == PaymentStatus::Paid) {
                    report.pay_after_default += 1;
                    continue;
                }
            }
            let first_gap = p.iter().position(|s| *s == PaymentStatus::Unobserved);
            if let Some(g) = first_gap {
                if p[g..].iter().any(|s| *s != PaymentStatus::Unobserved) {
                    // Interior gap: right-censor at the last contiguous month.
                    if first_default.map_or(true, |d| d > g) {
                        for s in &mut p[g..] {
                            *s = PaymentStatus::Unobserved;
                        }
                        report.truncated_histories += 1;
                    } else {
                        // Default happened before the gap; the default is the
                        // resolving event, later months are defaulted.
                        for s in &mut p[first_default.unwrap()..] {
                            *s = PaymentStatus::Defaulted;
                        }
                    }
                }
            }
            // Default is absorbing.
            if let Some(d) = p.iter().position(|s| *s == PaymentStatus::Defaulted) {
                for s in &mut p[d..] {
                    *s = PaymentStatus::Defaulted;
                }
            }
        }
        kept.push(r);
    }

    // Winsorization over the pooled sample, order-statistic bounds.
    if config.winsor_quantile > 0.0 && !kept.is_empty() {
        let q = config.winsor_quantile;
        let mut bounds = Vec::with_capacity(WINSOR_COLUMNS.len());
        for name in WINSOR_COLUMNS {
            let mut values: Vec<f64> = kept
                .iter_mut()
                .map(|r| *winsor_field(r, name))
                .collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            bounds.push((
                order_quantile_sorted(&values, q),
                order_quantile_sorted(&values, 1.0 - q),
            ));
        }
        match config.winsor_mode {
            WinsorMode::Clamp => {
                for r in &mut kept {
                    for (name, &(lo, hi)) in WINSOR_COLUMNS.iter().zip(&bounds) {
                        let f = winsor_field(r, name);
                        *f = f.clamp(lo, hi);
                    }
                }
            }
            WinsorMode::Drop => {
                let before = kept.len();
                kept.retain(|r| {
                    let mut r = r.clone();
                    WINSOR_COLUMNS
                        .iter()
                        .zip(&bounds)
                        .all(|(name, &(lo, hi))| {
                            let v = *winsor_field(&mut r, name);
                            v >= lo && v <= hi
                        })
                });
                report.winsor_outliers = before - kept.len();
            }
        }
    }

    // Rate floor.
    let before = kept.len();
    kept.retain(|r| r.rate >= config.rate_floor);
    report.below_rate_floor = before - kept.len();

    report.kept = kept.len();
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn record(id: u64, gender: Gender, rate: f64, payments: Option<[PaymentStatus; 12]>) -> LoanRecord {
        LoanRecord {
            id,
            gender,
            married: false,
            age: 30.0,
            repeated: false,
            employment: 0,
            education: 0,
            past_failed: 0.0,
            past_aborted: 0.0,
            past_ontime: 0.0,
            past_late: 0.0,
            amount: 5.0,
            rate,
            app: false,
            express: false,
            province: 0,
            funded: payments.is_some(),
            payments,
        }
    }

    fn history(paid: usize, default: bool) -> [PaymentStatus; 12] {
        let mut p = [PaymentStatus::Unobserved; 12];
        for s in p.iter_mut().take(paid) {
            *s = PaymentStatus::Paid;
        }
        if default {
            for s in p.iter_mut().skip(paid) {
                *s = PaymentStatus::Defaulted;
            }
        }
        p
    }

    #[test]
    fn outcome_of_immediate_default_is_zero() {
        let r = record(1, Gender::Male, 0.30, Some(history(0, true)));
        let o = derive_outcome(&r).unwrap();
        assert_eq!(o.default_month, Some(0));
        assert_eq!(o.repayment_ratio, 0.0);
        assert_eq!(o.return_rate, 0.0);
    }

    #[test]
    fn outcome_of_six_paid_months_then_default() {
        let r = record(1, Gender::Female, 0.16, Some(history(6, true)));
        let o = derive_outcome(&r).unwrap();
        assert_eq!(o.default_month, Some(6));
        assert_relative_eq!(o.repayment_ratio, 0.5);
        assert_relative_eq!(o.return_rate, 0.58);
    }

    #[test]
    fn outcome_of_full_repayment() {
        let r = record(1, Gender::Female, 0.25, Some(history(12, false)));
        let o = derive_outcome(&r).unwrap();
        assert_eq!(o.default_month, None);
        assert_relative_eq!(o.repayment_ratio, 1.0);
        assert_relative_eq!(o.return_rate, 1.25);
    }

    #[test]
    fn censored_history_has_no_outcome() {
        let r = record(9, Gender::Male, 0.2, Some(history(5, false)));
        assert!(matches!(
            derive_outcome(&r),
            Err(Error::CensoredOutcome { id: 9 })
        ));
    }

    #[test]
    fn return_rate_factors_exactly_for_every_default_month() {
        for t in 0..=12u8 {
            let dm = if t == 12 { None } else { Some(t) };
            let o = RepaymentOutcome::from_default_month(dm, 0.23);
            assert!(
                (o.return_rate - o.repayment_ratio * 1.23).abs() <= 1e-12,
                "month {t}"
            );
        }
    }

    #[test]
    fn survival_encoding_matches_the_three_canonical_cases() {
        let records = vec![
            record(1, Gender::Male, 0.2, Some(history(12, false))),
            record(2, Gender::Male, 0.2, Some(history(3, true))),
            record(3, Gender::Female, 0.2, Some(history(5, false))),
        ];
        let layout = CovariateLayout::from_records(&records).unwrap();
        let samples = encode_survival(&records, &layout).unwrap();
        assert_eq!((samples[0].time, samples[0].censored), (12, true));
        assert_eq!((samples[1].time, samples[1].censored), (3, false));
        assert_eq!((samples[2].time, samples[2].censored), (5, true));
        assert_eq!(samples[0].last_risk_month(), Some(11));
        assert_eq!(samples[1].last_risk_month(), Some(3));
        assert_eq!(samples[2].last_risk_month(), Some(4));
    }

    #[test]
    fn pay_after_default_is_dropped() {
        let mut p = history(2, true);
        p[7] = PaymentStatus::Paid;
        let records = vec![
            record(1, Gender::Male, 0.2, Some(p)),
            record(2, Gender::Male, 0.2, Some(history(12, false))),
        ];
        let (kept, report) = preprocess(records, &PreprocessConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(report.pay_after_default, 1);
        assert_eq!(kept[0].id, 2);
    }

    #[test]
    fn interior_gap_right_censors_the_history() {
        let mut p = history(12, false);
        p[4] = PaymentStatus::Unobserved;
        let records = vec![record(1, Gender::Male, 0.2, Some(p))];
        let (kept, report) = preprocess(records, &PreprocessConfig::default()).unwrap();
        assert_eq!(report.truncated_histories, 1);
        let got = kept[0].payments.unwrap();
        for (t, s) in got.iter().enumerate() {
            let want = if t < 4 {
                PaymentStatus::Paid
            } else {
                PaymentStatus::Unobserved
            };
            assert_eq!(*s, want, "month {t}");
        }
    }

    #[test]
    fn rate_floor_drops_strictly_below() {
        let records = vec![
            record(1, Gender::Male, 0.16, None),
            record(2, Gender::Male, 0.1599, None),
        ];
        let (kept, report) = preprocess(records, &PreprocessConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, 1);
        assert_eq!(report.below_rate_floor, 1);
    }

    #[test]
    fn zero_winsor_quantile_is_identity_on_covariates() {
        let mut records: Vec<LoanRecord> = (0..50)
            .map(|i| {
                let mut r = record(i, Gender::Male, 0.2, None);
                r.amount = i as f64 * 7.3;
                r.age = 18.0 + i as f64;
                r
            })
            .collect();
        records[49].amount = 1e6;
        let cfg = PreprocessConfig {
            winsor_quantile: 0.0,
            ..PreprocessConfig::default()
        };
        let (kept, _) = preprocess(records.clone(), &cfg).unwrap();
        assert_eq!(kept, records);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            preprocess(Vec::new(), &PreprocessConfig::default()),
            Err(Error::NoRecords)
        ));
    }

    #[test]
    fn layout_expands_categories_against_reference_zero() {
        let mut a = record(1, Gender::Male, 0.2, None);
        a.employment = 2;
        a.education = 4;
        a.province = 3;
        let b = record(2, Gender::Female, 0.2, None);
        let layout = CovariateLayout::from_records(&[a.clone(), b]).unwrap();
        assert_eq!(layout.provinces, 4);
        let row = layout.row(&a);
        let idx = |name: &str| layout.names.iter().position(|n| n == name).unwrap();
        assert_eq!(row[idx("male")], 1.0);
        assert_eq!(row[idx("employment_2")], 1.0);
        assert_eq!(row[idx("employment_1")], 0.0);
        assert_eq!(row[idx("education_4")], 1.0);
        assert_eq!(row[idx("province_3")], 1.0);
        assert_eq!(row[idx("province_1")], 0.0);
        assert_eq!(row[idx("rate")], 0.2);
    }

    proptest! {
        #[test]
        fn clamp_mode_preprocess_is_idempotent(
            amounts in proptest::collection::vec(0.0f64..100.0, 30..80),
            q in 0.0f64..0.2,
        ) {
            let records: Vec<LoanRecord> = amounts
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let mut r = record(i as u64, if i % 3 == 0 { Gender::Female } else { Gender::Male }, 0.2 + (i % 5) as f64 * 0.03, Some(history(i % 13, i % 4 == 0 && i % 13 < 12)));
                    r.amount = a;
                    r.age = 18.0 + (i % 40) as f64;
                    r
                })
                .collect();
            let cfg = PreprocessConfig { winsor_quantile: q, winsor_mode: WinsorMode::Clamp, rate_floor: 0.16 };
            let (once, _) = preprocess(records, &cfg).unwrap();
            let (twice, report) = preprocess(once.clone(), &cfg).unwrap();
            prop_assert_eq!(once, twice);
            prop_assert_eq!(report.pay_after_default, 0);
        }

        #[test]
        fn identity_between_outcome_and_ratio_holds(t in 0u8..13, rate in 0.0f64..0.4) {
            let dm = if t == 12 { None } else { Some(t) };
            let o = RepaymentOutcome::from_default_month(dm, rate);
            prop_assert!((o.return_rate - o.repayment_ratio * (1.0 + rate)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&o.repayment_ratio));
        }
    }
}
