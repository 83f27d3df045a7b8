//! Configurable synthetic loan markets with recorded ground truth.
//!
//! A [`MarketSpec`] describes a population (covariate mix, per-gender
//! interest-rate grids), a repayment process, and a funding rule.
//! [`generate`] materializes it as the standard [`LoanRecord`] rows the rest
//! of the crate consumes, plus a [`GroundTruth`] table holding every latent
//! quantity (true default month, repayment ratio, investor signal and
//! posterior, funding decision). Because the generator knows the truth for
//! funded and unfunded loans alike, it can score any estimator: the true
//! disparity profile comes from [`GroundTruth::profile`], and
//! [`bias_oracle`] checks the identity linking first-stage imputation bias
//! to the bias of the binned disparity estimate.
//!
//! Two repayment processes are supported. The hazard form draws each month's
//! default from a per-month baseline times covariate effects whose log
//! hazard ratios may drift linearly in time, matching the model the fitting
//! code assumes. The twelfths forms (Gaussian or an explicit 13-point table)
//! draw the repaid fraction directly, which breaks the fitted model's
//! assumptions on purpose: estimators can be probed under misspecification.
//!
//! The funding rule mirrors a rational investor: a noisy signal `s` of the
//! repayment ratio, a gender-specific prior, and a gross-return threshold.
//! With prior N(mu, sigma0^2) and signal noise sd sigma1, the posterior mean
//! is `(1 - gamma) * mu + gamma * s` with reliability
//! `gamma = sigma0^2 / (sigma0^2 + sigma1^2)`, and the loan is funded when
//! `posterior * (1 + rate) >= pi` for the group threshold `pi` (optionally
//! shifted by covariate-dependent premium offsets).

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Gender, GenderPair, LoanRecord, PaymentStatus};
use crate::di::{BinGrid, GapProfile, ImputedReturn, ReturnObservation};
use crate::error::{Error, Result};
use crate::stream::{stream, Domain};

/// One covariate's contribution to the log hazard, with an optional linear
/// drift of the coefficient across the 12 months.
///
/// The month-`t` log hazard ratio is `coefficient + drift * (t/11 - 1/2)`,
/// so `drift` is the total swing from month 0 to month 11 and the average
/// coefficient stays at `coefficient`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardEffect {
    /// Field name as accepted by [`LoanRecord::field`].
    pub field: String,
    pub coefficient: f64,
    /// Value subtracted from the field before multiplying, so the baseline
    /// describes a reference borrower rather than an all-zero one.
    pub center: f64,
    pub drift: f64,
}

impl HazardEffect {
    pub fn fixed(field: &str, coefficient: f64, center: f64) -> HazardEffect {
        HazardEffect {
            field: field.into(),
            coefficient,
            center,
            drift: 0.0,
        }
    }

    fn at_month(&self, t: usize) -> f64 {
        self.coefficient + self.drift * (t as f64 / 11.0 - 0.5)
    }
}

/// How repayment outcomes are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepaymentMode {
    /// Discrete-time proportional-hazards process: month `t` defaults with
    /// probability `baseline[t] * exp(sum of effects)`, clamped to [0, 1].
    Hazard {
        /// Twelve per-month baseline default probabilities.
        baseline: Vec<f64>,
        effects: Vec<HazardEffect>,
    },
    /// Repaid fraction drawn as N(mean, sd^2) per gender, clipped to [0, 1]
    /// and rounded to twelfths. The unclipped draw is kept in the ground
    /// truth as `lambda_raw`.
    GaussianTwelfths {
        mean: GenderPair<f64>,
        sd: GenderPair<f64>,
    },
    /// Repaid fraction drawn from an explicit per-gender table of weights
    /// over `0/12, 1/12, .., 12/12`.
    DiscreteTwelfths { female: Vec<f64>, male: Vec<f64> },
}

/// Extra required return applied when a record field equals a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiumOffset {
    pub field: String,
    pub equals: f64,
    pub shift: GenderPair<f64>,
}

/// How the funding decision is made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FundingRule {
    /// Noisy-signal posterior thresholding, the rational-investor rule.
    Posterior {
        prior_mean: GenderPair<f64>,
        prior_sd: GenderPair<f64>,
        signal_sd: GenderPair<f64>,
        /// Gross-return threshold `pi`: fund when the posterior expected
        /// gross return reaches it.
        required_return: GenderPair<f64>,
        /// Draw the signal around the unrounded repaid fraction instead of
        /// the twelfths value recorded in the data.
        #[serde(default)]
        raw_signal: bool,
        #[serde(default)]
        premium_offsets: Vec<PremiumOffset>,
    },
    /// Deterministic, gender-blind rule: fund when the true gross return
    /// `lambda * (1 + rate)` reaches the cutoff.
    ReturnCutoff { cutoff: f64 },
    /// Fund everything; useful for generators that feed the survival fit.
    FundAll,
}

/// Discrete interest-rate distribution, one weight vector per gender over a
/// shared value grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateGrid {
    pub values: Vec<f64>,
    pub weights: GenderPair<Vec<f64>>,
}

impl RateGrid {
    /// Evenly spaced values with truncated-geometric weights `decay^k`.
    /// Decay 1 is uniform; smaller decay concentrates mass on low rates.
    pub fn geometric(start: f64, step: f64, count: usize, decay: GenderPair<f64>) -> RateGrid {
        let values: Vec<f64> = (0..count).map(|k| start + step * k as f64).collect();
        let series = |q: f64| -> Vec<f64> {
            let raw: Vec<f64> = (0..count).map(|k| q.powi(k as i32)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        };
        RateGrid {
            values,
            weights: GenderPair::new(series(decay.female), series(decay.male)),
        }
    }

    fn mean(&self, g: Gender) -> f64 {
        let w = self.weights.get(g);
        let total: f64 = w.iter().sum();
        self.values
            .iter()
            .zip(w)
            .map(|(v, w)| v * w)
            .sum::<f64>()
            / total
    }
}

fn default_married_share() -> GenderPair<f64> {
    GenderPair::uniform(0.55)
}

/// Full description of a synthetic market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub label: String,
    /// Number of loan applications.
    pub n: usize,
    /// Share of male applicants.
    pub male_share: f64,
    /// Share of married applicants per gender. Unequal shares give the
    /// covariate a gender signature, so funding rules keyed on it route part
    /// of any gender gap through an observed control.
    #[serde(default = "default_married_share")]
    pub married_share: GenderPair<f64>,
    /// Number of province categories, drawn uniformly.
    pub provinces: u8,
    /// Share of funded loans whose observation window is cut short at a
    /// uniform month in 1..=11 (visible only when no earlier default).
    pub censor_fraction: f64,
    pub rates: RateGrid,
    pub repayment: RepaymentMode,
    pub funding: FundingRule,
}

impl MarketSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidMarketSpec(m));
        if self.n == 0 {
            return bad("market size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.male_share) {
            return bad(format!("male share {} outside [0, 1]", self.male_share));
        }
        for (name, share) in [
            ("female married share", self.married_share.female),
            ("male married share", self.married_share.male),
        ] {
            if !(0.0..=1.0).contains(&share) {
                return bad(format!("{name} {share} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.censor_fraction) {
            return bad(format!(
                "censor fraction {} outside [0, 1)",
                self.censor_fraction
            ));
        }
        if self.provinces == 0 {
            return bad("province count must be positive".into());
        }
        check_weights("female rate weights", self.rates.weights.get(Gender::Female))?;
        check_weights("male rate weights", self.rates.weights.get(Gender::Male))?;
        if self.rates.values.len() != self.rates.weights.female.len()
            || self.rates.values.len() != self.rates.weights.male.len()
        {
            return bad("rate values and weights differ in length".into());
        }
        if self.rates.values.iter().any(|r| *r <= -1.0) {
            return bad("interest rates must exceed -100%".into());
        }
        match &self.repayment {
            RepaymentMode::Hazard { baseline, effects } => {
                if baseline.len() != 12 {
                    return bad(format!(
                        "baseline hazard has {} months, need 12",
                        baseline.len()
                    ));
                }
                if baseline.iter().any(|h| !(0.0..=1.0).contains(h)) {
                    return bad("baseline hazards must lie in [0, 1]".into());
                }
                let probe = LoanRecord::probe();
                for e in effects {
                    if probe.field(&e.field).is_none() {
                        return bad(format!("unknown hazard effect field `{}`", e.field));
                    }
                }
            }
            RepaymentMode::GaussianTwelfths { sd, .. } => {
                if sd.female <= 0.0 || sd.male <= 0.0 {
                    return bad("repayment sd must be positive".into());
                }
            }
            RepaymentMode::DiscreteTwelfths { female, male } => {
                for (name, w) in [("female", female), ("male", male)] {
                    if w.len() != 13 {
                        return bad(format!(
                            "{name} twelfth weights have {} entries, need 13",
                            w.len()
                        ));
                    }
                    check_weights(&format!("{name} twelfth weights"), w)?;
                }
            }
        }
        match &self.funding {
            FundingRule::Posterior {
                prior_sd,
                signal_sd,
                premium_offsets,
                ..
            } => {
                if prior_sd.female <= 0.0
                    || prior_sd.male <= 0.0
                    || signal_sd.female <= 0.0
                    || signal_sd.male <= 0.0
                {
                    return bad("prior and signal sds must be positive".into());
                }
                let probe = LoanRecord::probe();
                for o in premium_offsets {
                    if probe.field(&o.field).is_none() {
                        return bad(format!("unknown premium offset field `{}`", o.field));
                    }
                }
            }
            FundingRule::ReturnCutoff { .. } | FundingRule::FundAll => {}
        }
        Ok(())
    }

    /// Mean contract rate implied by the grid, per gender.
    pub fn mean_rate(&self, g: Gender) -> f64 {
        self.rates.mean(g)
    }
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|x| *x < 0.0 || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0
    {
        return Err(Error::InvalidMarketSpec(format!(
            "{name} must be nonnegative with positive total"
        )));
    }
    Ok(())
}

/// Latent state behind one generated loan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub id: u64,
    pub gender: Gender,
    pub rate: f64,
    pub funded: bool,
    /// True first default month, independent of censoring or funding.
    pub default_month: Option<u8>,
    /// Repaid fraction in twelfths, as the data format records it.
    pub lambda: f64,
    /// Unrounded repaid fraction where the mode has one (Gaussian draws);
    /// equals `lambda` otherwise.
    pub lambda_raw: f64,
    /// True gross return per unit lent, `lambda * (1 + rate)`.
    pub true_return: f64,
    /// Investor signal, when the funding rule draws one.
    pub signal: Option<f64>,
    /// Posterior expected repaid fraction behind the decision.
    pub posterior: Option<f64>,
    /// Month at which the observed history was cut, when censoring bit.
    pub censor_month: Option<u8>,
}

/// Latent state for a whole generated market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: String,
    pub seed: u64,
    pub rows: Vec<GroundTruthRow>,
}

impl GroundTruth {
    /// True disparity profile: funding rates per return bin computed from
    /// the true returns of every application, funded or not.
    pub fn profile(&self, grid: &BinGrid) -> Result<GapProfile> {
        let obs: Vec<ReturnObservation> = self
            .rows
            .iter()
            .map(|r| ReturnObservation {
                gender: r.gender,
                y: r.true_return,
                funded: r.funded,
            })
            .collect();
        crate::di::gap_profile(&obs, grid)
    }

    /// Observed funding rate for one gender.
    pub fn funding_rate(&self, g: Gender) -> f64 {
        let (funded, total) = self
            .rows
            .iter()
            .filter(|r| r.gender == g)
            .fold((0usize, 0usize), |(f, t), r| (f + r.funded as usize, t + 1));
        funded as f64 / total.max(1) as f64
    }
}

const BLOCK: usize = 4096;

/// Generate a market. Loans are produced in index blocks with one random
/// stream per block, so output is identical for any thread count.
pub fn generate(spec: &MarketSpec, seed: u64) -> Result<(Vec<LoanRecord>, GroundTruth)> {
    spec.validate()?;
    let blocks: Vec<(usize, usize)> = (0..spec.n)
        .step_by(BLOCK)
        .map(|start| (start, (start + BLOCK).min(spec.n)))
        .collect();
    let per_block: Vec<Vec<(LoanRecord, GroundTruthRow)>> = blocks
        .par_iter()
        .map(|&(start, end)| {
            let mut rng = stream(seed, Domain::Simulate, (start / BLOCK) as u64);
            (start..end)
                .map(|i| generate_loan(spec, i as u64 + 1, &mut rng))
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(spec.n);
    let mut rows = Vec::with_capacity(spec.n);
    for block in per_block {
        for (rec, row) in block {
            records.push(rec);
            rows.push(row);
        }
    }
    Ok((
        records,
        GroundTruth {
            label: spec.label.clone(),
            seed,
            rows,
        },
    ))
}

fn generate_loan(spec: &MarketSpec, id: u64, rng: &mut impl Rng) -> (LoanRecord, GroundTruthRow) {
    let gender = if rng.gen_bool(spec.male_share) {
        Gender::Male
    } else {
        Gender::Female
    };
    let mut record = draw_covariates(spec, id, gender, rng);
    record.rate = spec.rates.values[sample_index(spec.rates.weights.get(gender), rng)];

    let (default_month, lambda, lambda_raw) = draw_repayment(spec, &record, rng);
    let true_return = lambda * (1.0 + record.rate);

    let (funded, signal, posterior) = decide_funding(spec, &record, lambda, lambda_raw, rng);
    record.funded = funded;

    let mut censor_month = None;
    if funded && spec.censor_fraction > 0.0 && rng.gen_bool(spec.censor_fraction) {
        let c = rng.gen_range(1..=11u8);
        // The cut is visible only when no default resolves the loan first.
        if default_month.map_or(true, |t| c <= t) {
            censor_month = Some(c);
        }
    }
    record.payments = funded.then(|| build_payments(default_month, censor_month));

    let row = GroundTruthRow {
        id,
        gender,
        rate: record.rate,
        funded,
        default_month,
        lambda,
        lambda_raw,
        true_return,
        signal,
        posterior,
        censor_month,
    };
    (record, row)
}

fn draw_covariates(spec: &MarketSpec, id: u64, gender: Gender, rng: &mut impl Rng) -> LoanRecord {
    let age_dist: Normal<f64> = Normal::new(37.0, 10.0).expect("fixed sd");
    let amount_dist: LogNormal<f64> = LogNormal::new(5f64.ln(), 0.8).expect("fixed sd");
    let count = |mean: f64, rng: &mut dyn rand::RngCore| -> f64 {
        Poisson::new(mean).expect("fixed mean").sample(rng)
    };
    LoanRecord {
        id,
        gender,
        married: rng.gen_bool(spec.married_share.value(gender)),
        age: age_dist.sample(rng).clamp(18.0, 75.0),
        repeated: rng.gen_bool(0.30),
        employment: sample_index(&[0.30, 0.25, 0.20, 0.15, 0.10], rng) as u8,
        education: sample_index(&[0.25, 0.30, 0.25, 0.15, 0.05], rng) as u8,
        past_failed: count(0.15, rng),
        past_aborted: count(0.25, rng),
        past_ontime: count(3.0, rng),
        past_late: count(0.40, rng),
        amount: amount_dist.sample(rng).clamp(0.5, 50.0),
        rate: 0.0,
        app: rng.gen_bool(0.40),
        express: rng.gen_bool(0.25),
        province: rng.gen_range(0..spec.provinces),
        funded: false,
        payments: None,
    }
}

fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        target -= w;
        if target < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Returns (true default month, twelfths repaid fraction, raw fraction).
fn draw_repayment(
    spec: &MarketSpec,
    record: &LoanRecord,
    rng: &mut impl Rng,
) -> (Option<u8>, f64, f64) {
    match &spec.repayment {
        RepaymentMode::Hazard { baseline, effects } => {
            for t in 0..12 {
                let mut log_ratio = 0.0;
                for e in effects {
                    let x = record.field(&e.field).expect("validated field");
                    log_ratio += e.at_month(t) * (x - e.center);
                }
                let h = (baseline[t] * log_ratio.exp()).clamp(0.0, 1.0);
                if rng.gen::<f64>() < h {
                    let lambda = t as f64 / 12.0;
                    return (Some(t as u8), lambda, lambda);
                }
            }
            (None, 1.0, 1.0)
        }
        RepaymentMode::GaussianTwelfths { mean, sd } => {
            let dist = Normal::new(mean.value(record.gender), sd.value(record.gender))
                .expect("validated sd");
            let raw = dist.sample(rng);
            let k = (raw.clamp(0.0, 1.0) * 12.0).round() as u8;
            (month_of(k), f64::from(k) / 12.0, raw)
        }
        RepaymentMode::DiscreteTwelfths { female, male } => {
            let weights = match record.gender {
                Gender::Female => female,
                Gender::Male => male,
            };
            let k = sample_index(weights, rng) as u8;
            let lambda = f64::from(k) / 12.0;
            (month_of(k), lambda, lambda)
        }
    }
}

fn month_of(paid_months: u8) -> Option<u8> {
    (paid_months < 12).then_some(paid_months)
}

/// Returns (funded, signal, posterior mean).
fn decide_funding(
    spec: &MarketSpec,
    record: &LoanRecord,
    lambda: f64,
    lambda_raw: f64,
    rng: &mut impl Rng,
) -> (bool, Option<f64>, Option<f64>) {
    match &spec.funding {
        FundingRule::Posterior {
            prior_mean,
            prior_sd,
            signal_sd,
            required_return,
            raw_signal,
            premium_offsets,
        } => {
            let g = record.gender;
            let center = if *raw_signal { lambda_raw } else { lambda };
            let s1 = signal_sd.value(g);
            let signal = center + s1 * Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
            let s0 = prior_sd.value(g);
            let gamma = s0 * s0 / (s0 * s0 + s1 * s1);
            let posterior = (1.0 - gamma) * prior_mean.value(g) + gamma * signal;
            let mut pi = required_return.value(g);
            for o in premium_offsets {
                let v = record.field(&o.field).expect("validated field");
                if (v - o.equals).abs() < 1e-9 {
                    pi += o.shift.value(g);
                }
            }
            let funded = posterior * (1.0 + record.rate) >= pi;
            (funded, Some(signal), Some(posterior))
        }
        FundingRule::ReturnCutoff { cutoff } => {
            (lambda * (1.0 + record.rate) >= *cutoff, None, None)
        }
        FundingRule::FundAll => (true, None, None),
    }
}

fn build_payments(default_month: Option<u8>, censor_month: Option<u8>) -> [PaymentStatus; 12] {
    let mut p = [PaymentStatus::Paid; 12];
    if let Some(c) = censor_month {
        for slot in p.iter_mut().skip(c as usize) {
            *slot = PaymentStatus::Unobserved;
        }
    } else if let Some(t) = default_month {
        for slot in p.iter_mut().skip(t as usize) {
            *slot = PaymentStatus::Defaulted;
        }
    }
    p
}

/// One return bin of the bias identity check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasCell {
    pub lower: f64,
    pub upper: f64,
    /// First-stage bias per gender: imputed minus true conditional bin mass
    /// among unfunded loans.
    pub first_stage: GenderPair<f64>,
    /// Estimator bias predicted from the first-stage biases.
    pub predicted: f64,
    /// Directly measured bias: estimated minus true per-bin gap, computed
    /// from an independent imputation pass.
    pub measured: f64,
    /// Three combined Monte Carlo standard errors.
    pub tolerance: f64,
    pub within: bool,
}

/// Imputed-versus-true repayment distribution in one (gender, rate, level)
/// cell among unfunded loans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaBias {
    pub gender: Gender,
    pub rate: f64,
    /// Repaid fraction level, in twelfths.
    pub level: f64,
    pub imputed_mass: f64,
    pub true_mass: f64,
}

/// Result of the first-stage bias identity check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub cells: Vec<BiasCell>,
    /// Per-(gender, rate, twelfth) bias table from the components pass.
    pub lambda_table: Vec<LambdaBias>,
    /// Unfunded-mass-weighted mean absolute first-stage bin bias.
    pub mean_abs_first_stage: GenderPair<f64>,
    /// Bins skipped for lacking enough of either gender.
    pub excluded_bins: usize,
    /// Share of evaluated bins whose measured bias sits within tolerance.
    pub agreement: f64,
}

/// Minimum per-gender pooled count for a bin to enter the identity check.
const MIN_BIN_COUNT: usize = 25;

struct GenderTally {
    n: f64,
    unfunded: f64,
    /// Funded true-return mass per bin.
    a: Vec<f64>,
    /// Unfunded true-return mass per bin.
    b: Vec<f64>,
    /// Unfunded imputed mass per bin, components pass.
    b_hat: Vec<f64>,
    /// Raw counts per bin in the measured pass, [funded, unfunded].
    measured: Vec<[usize; 2]>,
    /// Raw unfunded counts per bin in the components pass.
    components_unfunded: Vec<usize>,
    /// Raw true counts per bin, [funded, unfunded].
    true_counts: Vec<[usize; 2]>,
}

/// Check the identity tying first-stage imputation bias to the bias of the
/// binned disparity estimate.
///
/// `components` and `measured` are two imputation passes over the same
/// records from independent random streams. The first supplies the
/// first-stage bias estimates entering the prediction; the second plays the
/// role of "the estimate whose bias we predict". Using separate passes keeps
/// the check a genuine Monte Carlo test rather than an algebraic tautology.
/// Censored funded loans are treated as if observed (their simulated tails
/// count as true returns are unknown): markets used with this oracle should
/// set `censor_fraction` to zero.
pub fn bias_oracle(
    truth: &GroundTruth,
    components: &[ImputedReturn],
    measured: &[ImputedReturn],
    grid: &BinGrid,
) -> Result<BiasReport> {
    if components.len() != truth.rows.len() || measured.len() != truth.rows.len() {
        return Err(Error::InvalidConfig(
            "imputation passes do not align with the ground truth".into(),
        ));
    }
    let k = grid.count();
    let mut tally = GenderPair::new(GenderTally::new(k), GenderTally::new(k));
    for ((row, comp), meas) in truth.rows.iter().zip(components).zip(measured) {
        if row.id != comp.id || row.id != meas.id {
            return Err(Error::InvalidConfig(
                "imputation passes are ordered differently from the ground truth".into(),
            ));
        }
        let t = match row.gender {
            Gender::Female => &mut tally.female,
            Gender::Male => &mut tally.male,
        };
        t.n += 1.0;
        if let Some(i) = grid.index(row.true_return) {
            t.true_counts[i][row.funded as usize ^ 1] += 1;
            if row.funded {
                t.a[i] += 1.0;
            } else {
                t.b[i] += 1.0;
            }
        }
        if !row.funded {
            t.unfunded += 1.0;
            if let Some(i) = grid.index(comp.y) {
                t.b_hat[i] += 1.0;
                t.components_unfunded[i] += 1;
            }
        }
        if let Some(i) = grid.index(meas.y) {
            t.measured[i][row.funded as usize ^ 1] += 1;
        }
    }
    for t in [&mut tally.female, &mut tally.male] {
        if t.n == 0.0 {
            return Err(Error::SingleGender);
        }
        t.normalize();
    }

    let mut cells = Vec::new();
    let mut excluded = 0usize;
    let mut within_count = 0usize;
    let mut abs_sum = GenderPair::uniform(0.0);
    let mut abs_weight = GenderPair::uniform(0.0);
    for i in 0..k {
        let (lower, upper) = grid.edges(i);
        let pooled_f = tally.female.true_counts[i][0] + tally.female.true_counts[i][1];
        let pooled_m = tally.male.true_counts[i][0] + tally.male.true_counts[i][1];
        if pooled_f < MIN_BIN_COUNT || pooled_m < MIN_BIN_COUNT {
            excluded += 1;
            continue;
        }
        let part = |t: &GenderTally| -> Option<(f64, f64, f64)> {
            // (predicted bias contribution, measured estimate, true rate)
            let (a, b, b_hat) = (t.a[i], t.b[i], t.b_hat[i]);
            let first = (b_hat - b) / t.share_unfunded();
            let predicted =
                -a * t.share_unfunded() * first / ((a + b_hat) * (a + b));
            let m = t.measured[i];
            let m_total = m[0] + m[1];
            if m_total == 0 || a + b == 0.0 || a + b_hat == 0.0 {
                return None;
            }
            let est = m[0] as f64 / m_total as f64;
            let truth_rate = a / (a + b);
            Some((predicted, est, truth_rate))
        };
        let (Some((pred_f, est_f, true_f)), Some((pred_m, est_m, true_m))) =
            (part(&tally.female), part(&tally.male))
        else {
            excluded += 1;
            continue;
        };
        let first_f = (tally.female.b_hat[i] - tally.female.b[i]) / tally.female.share_unfunded();
        let first_m = (tally.male.b_hat[i] - tally.male.b[i]) / tally.male.share_unfunded();
        let predicted = pred_f - pred_m;
        let measured_bias = (est_f - est_m) - (true_f - true_m);
        let tol = 3.0
            * (bin_variance(&tally.female, i) + bin_variance(&tally.male, i)).sqrt();
        let within = (measured_bias - predicted).abs() <= tol;
        within_count += within as usize;
        abs_sum.female += first_f.abs() * tally.female.b[i];
        abs_weight.female += tally.female.b[i];
        abs_sum.male += first_m.abs() * tally.male.b[i];
        abs_weight.male += tally.male.b[i];
        cells.push(BiasCell {
            lower,
            upper,
            first_stage: GenderPair::new(first_f, first_m),
            predicted,
            measured: measured_bias,
            tolerance: tol,
            within,
        });
    }
    if cells.is_empty() {
        return Err(Error::InvalidConfig(
            "no return bin has enough of both genders for the bias check".into(),
        ));
    }
    let lambda_table = lambda_bias_table(truth, components);
    Ok(BiasReport {
        agreement: within_count as f64 / cells.len() as f64,
        cells,
        lambda_table,
        mean_abs_first_stage: GenderPair::new(
            abs_sum.female / abs_weight.female.max(1e-300),
            abs_sum.male / abs_weight.male.max(1e-300),
        ),
        excluded_bins: excluded,
    })
}

impl GenderTally {
    fn new(k: usize) -> GenderTally {
        GenderTally {
            n: 0.0,
            unfunded: 0.0,
            a: vec![0.0; k],
            b: vec![0.0; k],
            b_hat: vec![0.0; k],
            measured: vec![[0; 2]; k],
            components_unfunded: vec![0; k],
            true_counts: vec![[0; 2]; k],
        }
    }

    fn normalize(&mut self) {
        for v in self.a.iter_mut().chain(&mut self.b).chain(&mut self.b_hat) {
            *v /= self.n;
        }
    }

    fn share_unfunded(&self) -> f64 {
        (self.unfunded / self.n).max(1e-300)
    }
}

/// Monte Carlo variance of one gender's contribution to the measured-minus-
/// predicted gap in bin `i`: binomial noise of the measured per-bin funding
/// rate plus the imputation-placement noise feeding the prediction.
fn bin_variance(t: &GenderTally, i: usize) -> f64 {
    let m = t.measured[i];
    let m_total = (m[0] + m[1]) as f64;
    let p = m[0] as f64 / m_total;
    let measured_var = p * (1.0 - p) / m_total;
    // The prediction is roughly linear in the components-pass bin mass with
    // slope a / (a + b)^2 after normalization.
    let q = t.b_hat[i] / t.share_unfunded();
    let mass_var = q * (1.0 - q).max(0.0) / t.unfunded.max(1.0);
    let ab = t.a[i] + t.b[i];
    let slope = t.a[i] * t.share_unfunded() / (ab * ab).max(1e-300);
    measured_var + slope * slope * mass_var
}

/// Imputed-versus-true repaid-fraction tables per (gender, rate) cell among
/// unfunded loans, components pass.
fn lambda_bias_table(truth: &GroundTruth, components: &[ImputedReturn]) -> Vec<LambdaBias> {
    use std::collections::BTreeMap;
    // Key: (gender, rate in tenths of a basis point) -> 13 true + 13 imputed.
    let mut cells: BTreeMap<(bool, i64), ([f64; 13], [f64; 13], f64)> = BTreeMap::new();
    for (row, comp) in truth.rows.iter().zip(components) {
        if row.funded {
            continue;
        }
        let key = (row.gender == Gender::Male, (row.rate * 1e5).round() as i64);
        let entry = cells.entry(key).or_insert(([0.0; 13], [0.0; 13], 0.0));
        let true_level = (row.lambda * 12.0).round() as usize;
        let imputed_level = ((comp.y / (1.0 + row.rate)) * 12.0).round() as usize;
        entry.0[true_level.min(12)] += 1.0;
        entry.1[imputed_level.min(12)] += 1.0;
        entry.2 += 1.0;
    }
    let mut out = Vec::new();
    for ((is_male, rate_key), (true_mass, imputed_mass, n)) in cells {
        for level in 0..13 {
            out.push(LambdaBias {
                gender: if is_male { Gender::Male } else { Gender::Female },
                rate: rate_key as f64 / 1e5,
                level: level as f64 / 12.0,
                imputed_mass: imputed_mass[level] / n,
                true_mass: true_mass[level] / n,
            });
        }
    }
    out
}

/// Per-gender weights over repaid twelfths calibrated so that the female
/// distribution has mean 0.957, sd 0.167 with 92.4% full repayment and the
/// male one mean 0.934, sd 0.205 with 88.9% full repayment.
const FEMALE_TWELFTHS: [f64; 13] = [
    0.0053199421,
    0.0064538841,
    0.0070050515,
    0.0072839478,
    0.0073856426,
    0.0073487961,
    0.0071883522,
    0.0069045653,
    0.0064835348,
    0.0058900527,
    0.0050417430,
    0.0036944877,
    0.924,
];
const MALE_TWELFTHS: [f64; 13] = [
    0.0078629693,
    0.0102342560,
    0.0113762611,
    0.0118642777,
    0.0119017335,
    0.0115842562,
    0.0109613869,
    0.0100568760,
    0.0088752877,
    0.0074007597,
    0.0055847135,
    0.0032972224,
    0.889,
];

/// Baseline monthly default probabilities for the hazard presets: an early
/// spike, a mid-term hump, and a quiet tail, summing to about 0.079.
const HAZARD_BASELINE: [f64; 12] = [
    0.022, 0.004, 0.0045, 0.005, 0.0055, 0.006, 0.0065, 0.007, 0.0065, 0.005, 0.003, 0.0015,
];

/// Market calibrated to the reference marketplace's summary table: repayment
/// moments, rate distributions, funding rates (85.9% of women, 83.7% of
/// men), and a rational-investor rule whose female required return exceeds
/// the male one. The binned true disparity aggregates to about +0.048
/// (women funded more at equal return).
pub fn threshold_market(n: usize) -> MarketSpec {
    MarketSpec {
        label: "threshold".into(),
        n,
        male_share: 0.767,
        married_share: default_married_share(),
        provinces: 8,
        censor_fraction: 0.02,
        rates: RateGrid::geometric(0.16, 0.02, 11, GenderPair::new(0.888491, 0.995012)),
        repayment: RepaymentMode::DiscreteTwelfths {
            female: FEMALE_TWELFTHS.to_vec(),
            male: MALE_TWELFTHS.to_vec(),
        },
        funding: FundingRule::Posterior {
            prior_mean: GenderPair::new(0.957, 0.934),
            prior_sd: GenderPair::new(0.167, 0.205),
            signal_sd: GenderPair::new(0.482, 0.574),
            required_return: GenderPair::new(1.089131, 1.072324),
            raw_signal: false,
            premium_offsets: vec![],
        },
    }
}

/// Proportional-hazards market: repayment follows the model family the
/// fitting code assumes, everything is funded, and a small share is
/// censored. Used to check parameter recovery and diagnostics calibration.
pub fn hazard_market(n: usize) -> MarketSpec {
    MarketSpec {
        label: "hazard".into(),
        n,
        male_share: 0.5,
        married_share: default_married_share(),
        provinces: 8,
        censor_fraction: 0.02,
        rates: RateGrid::geometric(0.16, 0.02, 11, GenderPair::uniform(0.95)),
        repayment: RepaymentMode::Hazard {
            baseline: HAZARD_BASELINE.to_vec(),
            effects: vec![
                HazardEffect::fixed("male", 0.408, 0.0),
                HazardEffect::fixed("married", -0.239, 0.0),
                HazardEffect::fixed("age", 0.01, 37.0),
                HazardEffect::fixed("amount", 0.02, 5.0),
                HazardEffect::fixed("rate", 2.0, 0.25),
                HazardEffect::fixed("past_failed", 0.15, 0.0),
            ],
        },
        funding: FundingRule::FundAll,
    }
}

/// Hazard market whose male log hazard ratio flips sign over the year
/// (drift `swing`, average zero), violating proportional hazards.
pub fn drifting_market(n: usize, swing: f64) -> MarketSpec {
    let mut spec = hazard_market(n);
    spec.label = "hazard-drifting".into();
    if let RepaymentMode::Hazard { effects, .. } = &mut spec.repayment {
        effects[0] = HazardEffect {
            field: "male".into(),
            coefficient: 0.0,
            center: 0.0,
            drift: swing,
        };
    }
    spec
}

/// Threshold market where married women face an extra required-return
/// premium, concentrating the disparity in one subgroup.
pub fn heterogeneous_market(n: usize) -> MarketSpec {
    let mut spec = threshold_market(n);
    spec.label = "heterogeneous".into();
    if let FundingRule::Posterior {
        premium_offsets, ..
    } = &mut spec.funding
    {
        premium_offsets.push(PremiumOffset {
            field: "married".into(),
            equals: 1.0,
            shift: GenderPair::new(0.03, 0.0),
        });
    }
    spec
}

/// Market built so the three second-stage designs decompose the funding gap
/// the way the corresponding estimands should. Three channels are layered:
///
/// * a pure leniency gap — women clear a lower required return at equal
///   repayment, so the fully controlled gender coefficient stays positive;
/// * an observed mediating channel — married applicants clear a lower
///   threshold for both genders and women are married far more often, so
///   adding controls shrinks the gender coefficient;
/// * an omitted-outcome channel — within marriage cells men repay a bit
///   better (marriage itself is strongly protective, which still leaves
///   women ahead unconditionally), so the treatment design, which never
///   credits returns, shrinks the coefficient further.
///
/// Net effect: treatment < controlled < uncontrolled, all female-favoring.
pub fn decomposition_market(n: usize) -> MarketSpec {
    let mut spec = threshold_market(n);
    spec.label = "decomposition".into();
    spec.married_share = GenderPair::new(0.8, 0.3);
    spec.rates = RateGrid::geometric(0.16, 0.02, 11, GenderPair::uniform(0.94));
    spec.repayment = RepaymentMode::Hazard {
        baseline: HAZARD_BASELINE.iter().map(|b| b * 4.5).collect(),
        effects: vec![
            HazardEffect::fixed("married", -2.2, 0.0),
            HazardEffect::fixed("male", -0.8, 0.0),
        ],
    };
    spec.funding = FundingRule::Posterior {
        prior_mean: GenderPair::uniform(0.94),
        prior_sd: GenderPair::uniform(0.18),
        signal_sd: GenderPair::uniform(0.4),
        required_return: GenderPair::new(1.050, 1.068),
        raw_signal: false,
        premium_offsets: vec![PremiumOffset {
            field: "married".into(),
            equals: 1.0,
            shift: GenderPair::uniform(-0.015),
        }],
    };
    spec
}

/// Market with identical gender distributions and rules: any disparity
/// estimate should be statistical noise around zero.
pub fn null_market(n: usize) -> MarketSpec {
    MarketSpec {
        label: "null".into(),
        n,
        male_share: 0.5,
        married_share: default_married_share(),
        provinces: 8,
        censor_fraction: 0.02,
        rates: RateGrid::geometric(0.16, 0.02, 11, GenderPair::uniform(0.94)),
        repayment: RepaymentMode::DiscreteTwelfths {
            female: MALE_TWELFTHS.to_vec(),
            male: MALE_TWELFTHS.to_vec(),
        },
        funding: FundingRule::Posterior {
            prior_mean: GenderPair::uniform(0.934),
            prior_sd: GenderPair::uniform(0.205),
            signal_sd: GenderPair::uniform(0.574),
            required_return: GenderPair::uniform(1.08),
            raw_signal: false,
            premium_offsets: vec![],
        },
    }
}
