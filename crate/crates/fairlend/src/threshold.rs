//! Threshold test: Bayesian inference of group funding thresholds.
//!
//! The market model assumes investors see a noisy signal `s = lambda + e`,
//! `e ~ N(0, sigma1^2)`, hold a group prior `lambda ~ N(mu, sigma0^2)`, and
//! fund a loan when the posterior expected gross return clears a group
//! threshold: `E[lambda | s] * (1 + R) >= pi`. With signal reliability
//! `gamma = sigma1^-2 / (sigma0^-2 + sigma1^-2)`, the posterior mean is
//! `(1 - gamma) * mu + gamma * s`, so funding is a probit event in `lambda`:
//!
//! ```text
//! P(fund | lambda, R) = Phi( u*lambda - u*(pi/gamma)/(1+R) + u*(1/gamma - 1)*mu ),
//! u = 1/sigma1.
//! ```
//!
//! Group repayment moments `(mu, sigma0)` are measured directly from first-
//! stage output and treated as known. The free parameters per gender are the
//! signal precision `u` and the threshold `pi`; both get half-normal(2)
//! priors and are sampled with an adaptive random-walk Metropolis over the
//! Binomial-collapsed likelihood. A higher `pi` for one group than another
//! is the signature of taste-based discrimination: those borrowers must
//! promise a strictly higher expected return for the same funding decision.

use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::{Gender, GenderPair, LoanRecord};
use crate::di::ImputedReturn;
use crate::error::{Error, Result};
use crate::stats::{log_normal_cdf, normal_cdf, order_quantile_sorted};
use crate::stream::{stream, Domain};

/// Decision parameters of one gender's funding rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionParams {
    /// Mean repayment ratio of the group.
    pub mu: f64,
    /// Repayment-ratio standard deviation.
    pub sigma0: f64,
    /// Signal-noise standard deviation.
    pub sigma1: f64,
    /// Funding threshold on the expected gross return.
    pub pi: f64,
}

impl DecisionParams {
    /// Signal reliability: the weight the posterior mean puts on the
    /// individual signal rather than the group mean.
    pub fn gamma(&self) -> f64 {
        gamma(self.sigma0, self.sigma1)
    }
}

/// Signal reliability from the two scale parameters.
pub fn gamma(sigma0: f64, sigma1: f64) -> f64 {
    let p0 = sigma0.powi(-2);
    let p1 = sigma1.powi(-2);
    p1 / (p0 + p1)
}

/// Probability that a loan with repaid fraction `lambda` and contract rate
/// `rate` is funded under `params`. A zero signal noise degenerates to the
/// deterministic rule `lambda * (1 + rate) >= pi`.
pub fn success_probability(lambda: f64, rate: f64, params: &DecisionParams) -> f64 {
    if params.sigma1 == 0.0 {
        return f64::from(lambda * (1.0 + rate) >= params.pi);
    }
    let c = likelihood_coefficients(params);
    normal_cdf(c.lambda_coef * lambda + c.rate_coef / (1.0 + rate) + c.intercept)
}

/// The probit index written as a linear form in `lambda` and `1/(1+R)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCoeffs {
    /// Coefficient on `lambda`; equals the signal precision `1/sigma1`.
    pub lambda_coef: f64,
    /// Coefficient on `1/(1+R)`; equals `-pi/(gamma*sigma1)`.
    pub rate_coef: f64,
    /// Constant term `(1/gamma - 1)*mu/sigma1`. Redundant given the group
    /// moments: it is pinned by `lambda_coef`, `mu`, and `sigma0`.
    pub intercept: f64,
}

pub fn likelihood_coefficients(params: &DecisionParams) -> LinearCoeffs {
    let u = 1.0 / params.sigma1;
    let p0 = params.sigma0.powi(-2);
    LinearCoeffs {
        lambda_coef: u,
        rate_coef: -params.pi * (p0 + u * u) / u,
        intercept: p0 * params.mu / u,
    }
}

/// Invert [`likelihood_coefficients`] given the plug-in group moments. The
/// intercept is implied by the other inputs and ignored.
pub fn params_from_coefficients(
    coeffs: &LinearCoeffs,
    mu: f64,
    sigma0: f64,
) -> Result<DecisionParams> {
    if coeffs.lambda_coef <= 0.0 {
        return Err(Error::InvalidConfig(
            "signal precision must be positive".into(),
        ));
    }
    let u = coeffs.lambda_coef;
    let p0 = sigma0.powi(-2);
    Ok(DecisionParams {
        mu,
        sigma0,
        sigma1: 1.0 / u,
        pi: -coeffs.rate_coef * u / (p0 + u * u),
    })
}

/// One loan reduced to the variables the threshold test sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSample {
    pub gender: Gender,
    /// Repaid fraction in twelfths (imputed for unfunded loans).
    pub lambda: f64,
    pub rate: f64,
    pub funded: bool,
}

/// Pair records with an imputation pass, recovering the repaid fraction
/// from each imputed gross return.
pub fn lambda_samples(
    records: &[LoanRecord],
    imputed: &[ImputedReturn],
) -> Result<Vec<LambdaSample>> {
    if records.len() != imputed.len() {
        return Err(Error::InvalidConfig(
            "imputation pass does not align with the records".into(),
        ));
    }
    records
        .iter()
        .zip(imputed)
        .map(|(r, i)| {
            if r.id != i.id {
                return Err(Error::InvalidConfig(
                    "imputation pass is ordered differently from the records".into(),
                ));
            }
            let lambda = (i.y / (1.0 + r.rate) * 12.0).round() / 12.0;
            Ok(LambdaSample {
                gender: r.gender,
                lambda,
                rate: r.rate,
                funded: i.funded,
            })
        })
        .collect()
}

/// Group repayment moments (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

/// Per-gender repayment moments over all loans, funded and unfunded.
pub fn moments(samples: &[LambdaSample]) -> Result<GenderPair<Moments>> {
    let one = |g: Gender| -> Result<Moments> {
        let values: Vec<f64> = samples
            .iter()
            .filter(|s| s.gender == g)
            .map(|s| s.lambda)
            .collect();
        if values.is_empty() {
            return Err(Error::SingleGender);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Moments {
            mean,
            sd: var.sqrt(),
        })
    };
    Ok(GenderPair::new(one(Gender::Female)?, one(Gender::Male)?))
}

/// Funding outcomes pooled over loans sharing a (repaid fraction, rate)
/// cell, turning a product of Bernoullis into a short Binomial table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapsedCell {
    pub lambda: f64,
    pub rate: f64,
    pub trials: u64,
    pub funded: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CollapsedTable {
    pub female: Vec<CollapsedCell>,
    pub male: Vec<CollapsedCell>,
}

impl CollapsedTable {
    pub fn cells(&self, g: Gender) -> &[CollapsedCell] {
        match g {
            Gender::Female => &self.female,
            Gender::Male => &self.male,
        }
    }

    pub fn total_trials(&self) -> u64 {
        self.female
            .iter()
            .chain(&self.male)
            .map(|c| c.trials)
            .sum()
    }
}

/// Group loans into the Binomial table. Repaid fractions are keyed on the
/// nearest twelfth and rates on their exact bit pattern, so discrete-grid
/// inputs collapse exactly.
pub fn collapse(samples: &[LambdaSample]) -> CollapsedTable {
    let mut map: BTreeMap<(bool, u8, u64), (u64, u64)> = BTreeMap::new();
    for s in samples {
        let key = (
            s.gender == Gender::Male,
            (s.lambda * 12.0).round().clamp(0.0, 255.0) as u8,
            s.rate.to_bits(),
        );
        let e = map.entry(key).or_insert((0, 0));
        e.0 += 1;
        e.1 += u64::from(s.funded);
    }
    let mut table = CollapsedTable::default();
    for ((male, twelfths, rate_bits), (trials, funded)) in map {
        let cell = CollapsedCell {
            lambda: f64::from(twelfths) / 12.0,
            rate: f64::from_bits(rate_bits),
            trials,
            funded,
        };
        if male {
            table.male.push(cell);
        } else {
            table.female.push(cell);
        }
    }
    table
}

/// Parameter-dependent part of the Binomial log-likelihood of a collapsed
/// table under the linear probit form (the binomial coefficients are
/// constant in the parameters and omitted).
pub fn collapsed_loglik(cells: &[CollapsedCell], coeffs: &LinearCoeffs) -> f64 {
    cells
        .iter()
        .map(|c| {
            let arg =
                coeffs.lambda_coef * c.lambda + coeffs.rate_coef / (1.0 + c.rate) + coeffs.intercept;
            c.funded as f64 * log_normal_cdf(arg)
                + (c.trials - c.funded) as f64 * log_normal_cdf(-arg)
        })
        .sum()
}

/// Log-likelihood and its gradient in `(lambda_coef, rate_coef, intercept)`.
pub fn collapsed_loglik_grad(cells: &[CollapsedCell], coeffs: &LinearCoeffs) -> (f64, [f64; 3]) {
    let mut ll = 0.0;
    let mut grad = [0.0; 3];
    for c in cells {
        let inv = 1.0 / (1.0 + c.rate);
        let arg = coeffs.lambda_coef * c.lambda + coeffs.rate_coef * inv + coeffs.intercept;
        let (lcdf_pos, lcdf_neg) = (log_normal_cdf(arg), log_normal_cdf(-arg));
        ll += c.funded as f64 * lcdf_pos + (c.trials - c.funded) as f64 * lcdf_neg;
        let log_pdf = -0.5 * arg * arg - 0.5 * (2.0 * std::f64::consts::PI).ln();
        // d/d(arg) of the two log CDFs, written via Mills ratios.
        let dll = c.funded as f64 * (log_pdf - lcdf_pos).exp()
            - (c.trials - c.funded) as f64 * (log_pdf - lcdf_neg).exp();
        grad[0] += dll * c.lambda;
        grad[1] += dll * inv;
        grad[2] += dll;
    }
    (ll, grad)
}

/// Sampler settings. Defaults follow the convergence contract: four chains,
/// five thousand warmup and retained draws each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    /// Random-walk acceptance rate targeted during warmup adaptation.
    pub target_accept: f64,
    /// Convergence gate: largest tolerated split r-hat.
    pub max_rhat: f64,
    /// Convergence gate: smallest tolerated effective sample size.
    pub min_ess: f64,
}

impl Default for McmcConfig {
    fn default() -> McmcConfig {
        McmcConfig {
            chains: 4,
            warmup: 5000,
            draws: 5000,
            target_accept: 0.44,
            max_rhat: 1.01,
            min_ess: 400.0,
        }
    }
}

impl McmcConfig {
    /// Check the settings are usable; every consumer calls this first.
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::InvalidConfig(
                "need at least two chains for split r-hat".into(),
            ));
        }
        if self.draws < 100 || self.warmup < 100 {
            return Err(Error::InvalidConfig(
                "need at least 100 warmup and 100 retained draws".into(),
            ));
        }
        if !(0.05..0.95).contains(&self.target_accept) {
            return Err(Error::InvalidConfig(format!(
                "target acceptance {} outside (0.05, 0.95)",
                self.target_accept
            )));
        }
        Ok(())
    }
}

/// Posterior summary of one derived or sampled quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Central 95% interval.
    pub lower: f64,
    pub upper: f64,
    pub rhat: f64,
    pub ess: f64,
}

/// Posterior over one gender's `(1/sigma1, pi)` with the plug-in moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderPosterior {
    pub gender: Gender,
    pub mu: f64,
    pub sigma0: f64,
    /// Retained draws of `(1/sigma1, pi)` per chain.
    pub chains: Vec<Vec<[f64; 2]>>,
    /// Summaries for `precision`, `pi`, `sigma1`, and `gamma`.
    pub summaries: Vec<ParameterSummary>,
    /// Mean post-warmup acceptance rate over coordinates and chains.
    pub acceptance: f64,
}

impl GenderPosterior {
    /// All retained draws, chains concatenated.
    pub fn flat_draws(&self) -> Vec<[f64; 2]> {
        self.chains.iter().flatten().copied().collect()
    }

    pub fn summary(&self, name: &str) -> Option<&ParameterSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Posterior mean decision parameters.
    pub fn mean_params(&self) -> DecisionParams {
        let draws = self.flat_draws();
        let n = draws.len() as f64;
        let sigma1 = draws.iter().map(|d| 1.0 / d[0]).sum::<f64>() / n;
        let pi = draws.iter().map(|d| d[1]).sum::<f64>() / n;
        DecisionParams {
            mu: self.mu,
            sigma0: self.sigma0,
            sigma1,
            pi,
        }
    }
}

/// Joint result of the threshold test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPosterior {
    pub female: GenderPosterior,
    pub male: GenderPosterior,
    /// Posterior probability that the female threshold exceeds the male
    /// one, the taste-based-discrimination statement.
    pub prob_female_threshold_higher: f64,
}

/// Run the threshold test on a collapsed table with plug-in group moments.
///
/// Chains are independent random streams derived from the seed, run in
/// parallel, and checked against the convergence gates; failing either gate
/// returns [`Error::NoMixing`] with the offending statistics.
pub fn infer(
    table: &CollapsedTable,
    moments: &GenderPair<Moments>,
    config: &McmcConfig,
    seed: u64,
) -> Result<ThresholdPosterior> {
    config.validate()?;
    for m in [&moments.female, &moments.male] {
        if m.sd <= 0.0 {
            return Err(Error::InvalidConfig(
                "repayment sd must be positive to run the threshold test".into(),
            ));
        }
    }
    let female = infer_gender(Gender::Female, table, moments, config, seed)?;
    let male = infer_gender(Gender::Male, table, moments, config, seed)?;
    let prob = prob_pi_female_greater(&female, &male);
    Ok(ThresholdPosterior {
        female,
        male,
        prob_female_threshold_higher: prob,
    })
}

/// Share of paired posterior draws with the female threshold above the
/// male one.
pub fn prob_pi_female_greater(female: &GenderPosterior, male: &GenderPosterior) -> f64 {
    let f = female.flat_draws();
    let m = male.flat_draws();
    let n = f.len().min(m.len());
    if n == 0 {
        return f64::NAN;
    }
    f.iter()
        .zip(&m[..n])
        .filter(|(a, b)| a[1] > b[1])
        .count() as f64
        / n as f64
}

/// Pool replicate posteriors into a uniform mixture. Each replicate
/// contributes the same number of draws (all are truncated to the smallest
/// replicate). Mixing diagnostics keep the most pessimistic replicate value;
/// effective sizes add.
pub fn pool_posteriors(replicates: &[ThresholdPosterior]) -> Result<ThresholdPosterior> {
    if replicates.is_empty() {
        return Err(Error::InvalidConfig("no posteriors to pool".into()));
    }
    let pool_gender = |pick: &dyn Fn(&ThresholdPosterior) -> &GenderPosterior| -> GenderPosterior {
        let min_draws = replicates
            .iter()
            .map(|r| pick(r).flat_draws().len())
            .min()
            .unwrap_or(0);
        let chains: Vec<Vec<[f64; 2]>> = replicates
            .iter()
            .map(|r| {
                let mut d = pick(r).flat_draws();
                d.truncate(min_draws);
                d
            })
            .collect();
        let first = pick(&replicates[0]);
        let sigma0 = first.sigma0;
        let summaries = SUMMARY_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let pooled: Vec<f64> = chains
                    .iter()
                    .flatten()
                    .map(|d| match k {
                        3 => gamma(sigma0, 1.0 / d[0]),
                        _ => transform(k, d),
                    })
                    .collect();
                let rhat = replicates
                    .iter()
                    .filter_map(|r| pick(r).summary(name).map(|s| s.rhat))
                    .fold(f64::NAN, f64::max);
                let ess = replicates
                    .iter()
                    .filter_map(|r| pick(r).summary(name).map(|s| s.ess))
                    .sum();
                summarize(name, &pooled, rhat, ess)
            })
            .collect();
        let acceptance = replicates.iter().map(|r| pick(r).acceptance).sum::<f64>()
            / replicates.len() as f64;
        GenderPosterior {
            gender: first.gender,
            mu: first.mu,
            sigma0: first.sigma0,
            chains,
            summaries,
            acceptance,
        }
    };
    let female = pool_gender(&|r| &r.female);
    let male = pool_gender(&|r| &r.male);
    let prob = prob_pi_female_greater(&female, &male);
    Ok(ThresholdPosterior {
        female,
        male,
        prob_female_threshold_higher: prob,
    })
}

const SUMMARY_NAMES: [&str; 4] = ["precision", "pi", "sigma1", "gamma"];

/// First three summary transforms; gamma (index 3) additionally needs
/// sigma0 and is expanded at the call sites.
fn transform(which: usize, draw: &[f64; 2]) -> f64 {
    match which {
        0 => draw[0],
        1 => draw[1],
        _ => 1.0 / draw[0],
    }
}

fn infer_gender(
    gender: Gender,
    table: &CollapsedTable,
    moments: &GenderPair<Moments>,
    config: &McmcConfig,
    seed: u64,
) -> Result<GenderPosterior> {
    let m = moments.get(gender);
    let cells = table.cells(gender);
    let offset = match gender {
        Gender::Female => 0u64,
        Gender::Male => 4096,
    };
    let runs: Vec<(Vec<[f64; 2]>, f64)> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(cells, m, config, stream(seed, Domain::Sampler, offset + c as u64)))
        .collect();
    let chains: Vec<Vec<[f64; 2]>> = runs.iter().map(|(d, _)| d.clone()).collect();
    let acceptance = runs.iter().map(|(_, a)| a).sum::<f64>() / runs.len() as f64;

    let mut summaries = Vec::with_capacity(SUMMARY_NAMES.len());
    for (k, name) in SUMMARY_NAMES.iter().enumerate() {
        let series: Vec<Vec<f64>> = chains
            .iter()
            .map(|ch| {
                ch.iter()
                    .map(|d| match k {
                        3 => gamma(m.sd, 1.0 / d[0]),
                        _ => transform(k, d),
                    })
                    .collect()
            })
            .collect();
        let (rhat, ess) = mixing(&series);
        let flat: Vec<f64> = series.into_iter().flatten().collect();
        summaries.push(summarize(name, &flat, rhat, ess));
    }
    let worst_rhat = summaries.iter().map(|s| s.rhat).fold(f64::NAN, f64::max);
    let worst_ess = summaries.iter().map(|s| s.ess).fold(f64::INFINITY, f64::min);
    if !(worst_rhat <= config.max_rhat) || !(worst_ess >= config.min_ess) {
        return Err(Error::NoMixing {
            rhat: worst_rhat,
            limit: config.max_rhat,
            ess: worst_ess,
            floor: config.min_ess,
        });
    }
    Ok(GenderPosterior {
        gender,
        mu: m.mean,
        sigma0: m.sd,
        chains,
        summaries,
        acceptance,
    })
}

/// One adaptive random-walk Metropolis chain over `(u, pi)`, both positive
/// with half-normal(2) priors. Returns retained draws and the post-warmup
/// acceptance rate.
fn run_chain(
    cells: &[CollapsedCell],
    m: &Moments,
    config: &McmcConfig,
    mut rng: impl Rng,
) -> (Vec<[f64; 2]>, f64) {
    let p0 = m.sd.powi(-2);
    let log_post = |theta: &[f64; 2]| -> f64 {
        let (u, pi) = (theta[0], theta[1]);
        if u <= 0.0 || pi <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let coeffs = LinearCoeffs {
            lambda_coef: u,
            rate_coef: -pi * (p0 + u * u) / u,
            intercept: p0 * m.mean / u,
        };
        collapsed_loglik(cells, &coeffs) - (u * u + pi * pi) / 8.0
    };
    let half_normal = |rng: &mut dyn rand::RngCore| -> f64 {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        2.0 * z.abs()
    };
    let mut theta = [half_normal(&mut rng), half_normal(&mut rng)];
    let mut lp = log_post(&theta);
    let mut scales = [0.3f64; 2];
    let mut window_accepts = [0usize; 2];
    let mut kept_accepts = 0usize;
    let mut kept_proposals = 0usize;
    let mut draws = Vec::with_capacity(config.draws);

    const ADAPT_WINDOW: usize = 50;
    for iter in 0..config.warmup + config.draws {
        let warm = iter < config.warmup;
        for j in 0..2 {
            let mut proposal = theta;
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            proposal[j] += scales[j] * z;
            let lp_new = log_post(&proposal);
            let accept = lp_new - lp > rng.gen::<f64>().ln();
            if accept {
                theta = proposal;
                lp = lp_new;
            }
            if warm {
                window_accepts[j] += accept as usize;
            } else {
                kept_accepts += accept as usize;
                kept_proposals += 1;
            }
        }
        if warm && (iter + 1) % ADAPT_WINDOW == 0 {
            for j in 0..2 {
                let rate = window_accepts[j] as f64 / ADAPT_WINDOW as f64;
                scales[j] = (scales[j] * (rate - config.target_accept).exp()).clamp(1e-4, 10.0);
                window_accepts[j] = 0;
            }
        }
        if !warm {
            draws.push(theta);
        }
    }
    (draws, kept_accepts as f64 / kept_proposals.max(1) as f64)
}

/// Split r-hat and effective sample size over chains of equal length.
///
/// Every chain is halved; the potential scale reduction compares within-
/// and between-half variances, and the effective size combines per-half
/// autocorrelations truncated by the initial-monotone-positive-pair rule.
fn mixing(chains: &[Vec<f64>]) -> (f64, f64) {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let mid = c.len() / 2;
            [&c[..mid], &c[mid..mid * 2]]
        })
        .collect();
    let m = halves.len();
    let n = halves[0].len();
    if n < 4 {
        return (f64::INFINITY, 0.0);
    }
    let means: Vec<f64> = halves
        .iter()
        .map(|h| h.iter().sum::<f64>() / n as f64)
        .collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>()
        / (m - 1) as f64;
    let var_plus = (n - 1) as f64 / n as f64 * w + b / n as f64;
    // A constant series mixes perfectly rather than dividing zero by zero.
    if var_plus <= 0.0 || w <= 0.0 {
        let constant = halves
            .iter()
            .all(|h| h.iter().all(|x| *x == halves[0][0]));
        return if constant {
            (1.0, (m * n) as f64)
        } else {
            (f64::INFINITY, 0.0)
        };
    }
    let rhat = (var_plus / w).sqrt();

    // Combined autocorrelation at each lag from per-half autocovariances.
    let autocov = |h: &[f64], mu: f64, t: usize| -> f64 {
        (0..n - t).map(|i| (h[i] - mu) * (h[i + t] - mu)).sum::<f64>() / n as f64
    };
    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 1;
    while t + 1 < n {
        let rho = |t: usize| -> f64 {
            let mean_cov = halves
                .iter()
                .zip(&means)
                .map(|(h, mu)| autocov(h, *mu, t))
                .sum::<f64>()
                / m as f64;
            1.0 - (w - mean_cov) / var_plus
        };
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        // Enforce monotone decrease of the pair sums.
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        t += 2;
    }
    let ess = (m * n) as f64 / tau;
    (rhat, ess)
}

fn summarize(name: &str, draws: &[f64], rhat: f64, ess: f64) -> ParameterSummary {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    ParameterSummary {
        name: name.into(),
        mean,
        sd,
        lower: order_quantile_sorted(&sorted, 0.025),
        upper: order_quantile_sorted(&sorted, 0.975),
        rhat,
        ess,
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Binomial;

    fn female_params() -> DecisionParams {
        DecisionParams {
            mu: 0.957,
            sigma0: 0.167,
            sigma1: 0.482,
            pi: 1.099,
        }
    }

    #[test]
    fn reliability_matches_reference_values() {
        assert!((gamma(0.167, 0.482) - 0.107).abs() < 5e-4);
        assert!((gamma(0.205, 0.574) - 0.113).abs() < 5e-4);
    }

    #[test]
    fn success_probability_matches_hand_arithmetic() {
        let p = success_probability(1.0, 0.237, &female_params());
        // Independent evaluation of the probit index for these inputs.
        assert!((p - 0.9216657270).abs() < 1e-9, "got {p}");
        // The same arithmetic with the reliability rounded to three digits,
        // as quoted in summary tables, moves the answer only in the fourth
        // decimal.
        assert!((p - 0.9219875).abs() < 5e-4);
    }

    #[test]
    fn success_probability_is_monotone_and_centered() {
        let params = female_params();
        let mut last = 0.0;
        for i in 0..=20 {
            let p = success_probability(i as f64 / 20.0, 0.25, &params);
            assert!(p >= last);
            last = p;
        }
        let mut last = 0.0;
        for i in 0..=20 {
            let p = success_probability(0.9, 0.1 + 0.02 * i as f64, &params);
            assert!(p >= last);
            last = p;
        }
        // A repayment ratio putting the posterior mean exactly on the
        // threshold gives a coin flip.
        let g = params.gamma();
        let rate = 0.25;
        let lambda = (params.pi / (1.0 + rate) - (1.0 - g) * params.mu) / g;
        let p = success_probability(lambda, rate, &params);
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_degenerates_to_the_deterministic_rule() {
        let params = DecisionParams {
            sigma1: 0.0,
            ..female_params()
        };
        assert_eq!(success_probability(0.9, 0.25, &params), f64::from(0.9 * 1.25 >= 1.099));
        assert_eq!(success_probability(0.8, 0.25, &params), 0.0);
        assert_eq!(success_probability(1.0, 0.25, &params), 1.0);
    }

    #[test]
    fn coefficient_reparameterization_round_trips() {
        let params = female_params();
        let coeffs = likelihood_coefficients(&params);
        let back = params_from_coefficients(&coeffs, params.mu, params.sigma0).unwrap();
        assert!((back.sigma1 - params.sigma1).abs() < 1e-12);
        assert!((back.pi - params.pi).abs() < 1e-12);
        // The two forms give identical probabilities everywhere.
        for (lambda, rate) in [(0.5, 0.16), (11.0 / 12.0, 0.3), (1.0, 0.36)] {
            let direct = success_probability(lambda, rate, &params);
            let linear = normal_cdf(
                coeffs.lambda_coef * lambda + coeffs.rate_coef / (1.0 + rate) + coeffs.intercept,
            );
            assert!((direct - linear).abs() < 1e-12);
        }
    }

    fn toy_samples() -> Vec<LambdaSample> {
        let mut out = Vec::new();
        for i in 0..60u64 {
            out.push(LambdaSample {
                gender: if i % 3 == 0 { Gender::Male } else { Gender::Female },
                lambda: f64::from((i % 13) as u32) / 12.0,
                rate: 0.16 + 0.02 * (i % 4) as f64,
                funded: i % 5 != 0,
            });
        }
        out
    }

    #[test]
    fn collapse_pools_identical_cells() {
        let samples = vec![
            LambdaSample { gender: Gender::Female, lambda: 1.0, rate: 0.2, funded: true },
            LambdaSample { gender: Gender::Female, lambda: 1.0, rate: 0.2, funded: true },
            LambdaSample { gender: Gender::Female, lambda: 1.0, rate: 0.2, funded: false },
        ];
        let table = collapse(&samples);
        assert_eq!(table.female.len(), 1);
        assert!(table.male.is_empty());
        assert_eq!(table.female[0].trials, 3);
        assert_eq!(table.female[0].funded, 2);
        assert_eq!(table.total_trials(), 3);
    }

    #[test]
    fn collapsed_likelihood_equals_the_bernoulli_product() {
        let samples = toy_samples();
        let table = collapse(&samples);
        let mut rng = stream(3, Domain::Fixture, 0);
        for _ in 0..50 {
            let coeffs = LinearCoeffs {
                lambda_coef: rng.gen_range(0.2..4.0),
                rate_coef: -rng.gen_range(0.5..6.0),
                intercept: rng.gen_range(-1.0..3.0),
            };
            let collapsed: f64 = collapsed_loglik(&table.female, &coeffs)
                + collapsed_loglik(&table.male, &coeffs);
            let direct: f64 = samples
                .iter()
                .map(|s| {
                    let arg = coeffs.lambda_coef * s.lambda
                        + coeffs.rate_coef / (1.0 + s.rate)
                        + coeffs.intercept;
                    if s.funded {
                        log_normal_cdf(arg)
                    } else {
                        log_normal_cdf(-arg)
                    }
                })
                .sum();
            assert!(
                (collapsed - direct).abs() <= 1e-10 * direct.abs().max(1.0),
                "collapsed {collapsed} direct {direct}"
            );
        }
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let table = collapse(&toy_samples());
        let coeffs = LinearCoeffs {
            lambda_coef: 1.7,
            rate_coef: -2.3,
            intercept: 0.8,
        };
        let (_, grad) = collapsed_loglik_grad(&table.female, &coeffs);
        let h = 1e-6;
        for j in 0..3 {
            let mut up = coeffs;
            let mut down = coeffs;
            match j {
                0 => {
                    up.lambda_coef += h;
                    down.lambda_coef -= h;
                }
                1 => {
                    up.rate_coef += h;
                    down.rate_coef -= h;
                }
                _ => {
                    up.intercept += h;
                    down.intercept -= h;
                }
            }
            let fd = (collapsed_loglik(&table.female, &up) - collapsed_loglik(&table.female, &down))
                / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() <= 1e-5 * fd.abs().max(1.0),
                "coordinate {j}: fd {fd} analytic {}",
                grad[j]
            );
        }
    }

    #[test]
    fn moments_and_alignment_from_imputed_returns() {
        let records = vec![
            crate::testutil::loan(1, Gender::Female, 0.2, Some(crate::testutil::full_term())),
            crate::testutil::loan(2, Gender::Male, 0.2, Some(crate::testutil::full_term())),
        ];
        let imputed = vec![
            ImputedReturn { id: 1, gender: Gender::Female, funded: true, y: 1.2, defaulted: false, observed: true },
            ImputedReturn { id: 2, gender: Gender::Male, funded: true, y: 0.6, defaulted: true, observed: true },
        ];
        let samples = lambda_samples(&records, &imputed).unwrap();
        assert_eq!(samples[0].lambda, 1.0);
        assert_eq!(samples[1].lambda, 0.5);
        let m = moments(&samples).unwrap();
        assert_eq!(m.female.mean, 1.0);
        assert_eq!(m.female.sd, 0.0);
        assert_eq!(m.male.mean, 0.5);
        let single = vec![samples[0]];
        assert!(matches!(moments(&single), Err(Error::SingleGender)));
    }

    fn quick_config() -> McmcConfig {
        McmcConfig {
            chains: 4,
            warmup: 1500,
            draws: 1500,
            ..McmcConfig::default()
        }
    }

    /// Simulate a collapsed table from known parameters on the calibrated
    /// grids.
    fn simulated_table(
        n: usize,
        params: &GenderPair<DecisionParams>,
        seed: u64,
    ) -> (CollapsedTable, GenderPair<Moments>) {
        let spec = crate::synthetic::threshold_market(n);
        let mut rng = stream(seed, Domain::Fixture, 7);
        let mut table = CollapsedTable::default();
        let (weights, rates) = match &spec.repayment {
            crate::synthetic::RepaymentMode::DiscreteTwelfths { female, male } => {
                (GenderPair::new(female.clone(), male.clone()), spec.rates.clone())
            }
            _ => unreachable!(),
        };
        for (gender, share) in [(Gender::Female, 1.0 - spec.male_share), (Gender::Male, spec.male_share)] {
            let p = params.get(gender);
            let cells = match gender {
                Gender::Female => &mut table.female,
                Gender::Male => &mut table.male,
            };
            let w = weights.get(gender);
            let total_w: f64 = w.iter().sum();
            let rw = rates.weights.get(gender);
            let total_rw: f64 = rw.iter().sum();
            for (k, wk) in w.iter().enumerate() {
                for (j, wj) in rw.iter().enumerate() {
                    let lambda = k as f64 / 12.0;
                    let rate = rates.values[j];
                    let trials = (n as f64 * share * wk / total_w * wj / total_rw).round() as u64;
                    if trials == 0 {
                        continue;
                    }
                    let prob = success_probability(lambda, rate, p);
                    let funded = Binomial::new(trials, prob.clamp(1e-12, 1.0 - 1e-12))
                        .unwrap()
                        .sample(&mut rng);
                    cells.push(CollapsedCell { lambda, rate, trials, funded });
                }
            }
        }
        let m = GenderPair::new(
            Moments { mean: params.female.mu, sd: params.female.sigma0 },
            Moments { mean: params.male.mu, sd: params.male.sigma0 },
        );
        (table, m)
    }

    #[test]
    fn posterior_recovers_generating_parameters() {
        let truth = GenderPair::new(
            female_params(),
            DecisionParams { mu: 0.934, sigma0: 0.205, sigma1: 0.574, pi: 1.079 },
        );
        let (table, m) = simulated_table(120_000, &truth, 6);
        let posterior = infer(&table, &m, &McmcConfig::default(), 11).unwrap();
        for (g, p) in [(&posterior.female, &truth.female), (&posterior.male, &truth.male)] {
            let precision = g.summary("precision").unwrap();
            let pi = g.summary("pi").unwrap();
            assert!(
                (precision.mean - 1.0 / p.sigma1).abs() <= 2.0 * precision.sd,
                "precision {} +- {} vs {}",
                precision.mean,
                precision.sd,
                1.0 / p.sigma1
            );
            assert!(
                (pi.mean - p.pi).abs() <= 2.0 * pi.sd,
                "pi {} +- {} vs {}",
                pi.mean,
                pi.sd,
                p.pi
            );
            assert!(precision.rhat <= 1.01 && pi.rhat <= 1.01);
            assert!(precision.ess >= 400.0 && pi.ess >= 400.0);
        }
        // The generator put the female threshold above the male one.
        assert!(posterior.prob_female_threshold_higher >= 0.95);
    }

    #[test]
    fn undersized_runs_fail_the_convergence_gates() {
        let truth = GenderPair::new(
            female_params(),
            DecisionParams { mu: 0.934, sigma0: 0.205, sigma1: 0.574, pi: 1.079 },
        );
        let (table, m) = simulated_table(60_000, &truth, 2);
        let config = McmcConfig { chains: 2, warmup: 100, draws: 120, ..McmcConfig::default() };
        assert!(matches!(
            infer(&table, &m, &config, 3),
            Err(Error::NoMixing { .. })
        ));
    }

    #[test]
    fn empty_table_returns_the_prior() {
        let m = GenderPair::uniform(Moments { mean: 0.95, sd: 0.18 });
        let posterior = infer(&CollapsedTable::default(), &m, &quick_config(), 23).unwrap();
        for g in [&posterior.female, &posterior.male] {
            for name in ["precision", "pi"] {
                let s = g.summary(name).unwrap();
                // Half-normal(2) has mean 1.5957691216.
                assert!(
                    (s.mean - 1.5957691216).abs() < 0.05 * 1.5957691216,
                    "{name} prior mean came back {}",
                    s.mean
                );
            }
        }
    }

    #[test]
    fn pooling_point_masses_averages_them() {
        let point = |pi: f64, u: f64| -> ThresholdPosterior {
            let gp = |gender: Gender| GenderPosterior {
                gender,
                mu: 0.95,
                sigma0: 0.18,
                chains: vec![vec![[u, pi]; 10]; 2],
                summaries: SUMMARY_NAMES
                    .iter()
                    .map(|n| summarize(n, &[pi; 4], 1.0, 100.0))
                    .collect(),
                acceptance: 0.4,
            };
            ThresholdPosterior {
                female: gp(Gender::Female),
                male: gp(Gender::Male),
                prob_female_threshold_higher: 0.0,
            }
        };
        let pooled = pool_posteriors(&[point(1.0, 2.0), point(3.0, 4.0)]).unwrap();
        let pi = pooled.female.summary("pi").unwrap();
        assert!((pi.mean - 2.0).abs() < 1e-12);
        let precision = pooled.female.summary("precision").unwrap();
        assert!((precision.mean - 3.0).abs() < 1e-12);
        assert_eq!(pooled.female.summary("pi").unwrap().ess, 200.0);
        let single = pool_posteriors(&[point(1.0, 2.0)]).unwrap();
        assert!((single.female.summary("pi").unwrap().mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_flags_disagreeing_chains() {
        // Two chains stuck at different values: r-hat explodes.
        let chains = vec![vec![0.0; 400], vec![1.0; 400]];
        let (rhat, _) = mixing(&chains);
        assert!(rhat > 2.0);
        // Identical constant chains are trivially converged. The constant
        // is dyadic so the within-half variances are exactly zero.
        let (rhat, ess) = mixing(&vec![vec![0.5; 400]; 2]);
        assert_eq!(rhat, 1.0);
        assert_eq!(ess, 800.0);
        // Heavily autocorrelated chains lose most of their effective size.
        let mut rng = stream(1, Domain::Fixture, 2);
        let mut chains = Vec::new();
        for _ in 0..2 {
            let mut x = 0.0;
            let mut c = Vec::with_capacity(2000);
            for _ in 0..2000 {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                x = 0.95 * x + z * (1.0f64 - 0.95 * 0.95).sqrt();
                c.push(x);
            }
            chains.push(c);
        }
        let (_, ess) = mixing(&chains);
        assert!(ess < 400.0, "ess {ess} for a rho=0.95 walk");
    }
}
