//! Small numeric helpers shared across modules.

use crate::error::{Error, Result};

/// Arithmetic mean. Returns 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by n, not n-1).
pub fn population_sd(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    var.max(0.0).sqrt()
}

/// Interpolating quantile (R type 7) on a pre-sorted slice, `p` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = h - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Order-statistic quantile (R type 1) on a pre-sorted slice: the smallest
/// value with at least a fraction `p` of the sample at or below it. Always
/// returns an element of the slice, which makes clamping to it idempotent.
pub fn order_quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    let k = ((n as f64) * p.clamp(0.0, 1.0)).ceil() as usize;
    sorted[k.saturating_sub(1).min(n - 1)]
}

/// Two-sided percentile interval from raw draws using nearest-rank-above
/// order statistics; `(alpha/2, 1-alpha/2)` levels. For two draws and
/// `alpha = 0.05` this degenerates to `(min, max)`.
pub fn percentile_interval(draws: &[f64], alpha: f64) -> (f64, f64) {
    assert!(!draws.is_empty(), "percentile interval of empty slice");
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let pick = |p: f64| -> f64 {
        let k = (p * n).ceil().max(1.0) as usize;
        sorted[k.min(sorted.len()) - 1]
    };
    (pick(alpha / 2.0), pick(1.0 - alpha / 2.0))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Log of the standard normal CDF, stable far into the lower tail.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x < -10.0 {
        // Asymptotic expansion of Mills' ratio; relative error < 1e-12 here.
        let inv2 = 1.0 / (x * x);
        let series = 1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0)));
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
    } else {
        normal_cdf(x).ln()
    }
}

/// Log of the standard normal survival function `1 - Phi(x)`.
pub fn log_normal_sf(x: f64) -> f64 {
    log_normal_cdf(-x)
}

/// Upper-tail probability of a chi-squared distribution with `df` degrees of
/// freedom.
pub fn chi_squared_sf(x: f64, df: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if x <= 0.0 {
        return 1.0;
    }
    match ChiSquared::new(df) {
        Ok(d) => d.sf(x),
        Err(_) => f64::NAN,
    }
}

/// One grid point of a local linear smooth.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SmoothPoint {
    pub x: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Local linear regression with a Gaussian kernel, evaluated on `grid`.
/// `bandwidth` is in the units of `x`. Pointwise bands are the normal
/// approximation `estimate +/- 1.96 * se`, with the residual scale taken from
/// the global fit residuals.
pub fn local_linear(x: &[f64], y: &[f64], grid: &[f64], bandwidth: f64) -> Result<Vec<SmoothPoint>> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidConfig(
            "local_linear needs matching nonempty x and y".into(),
        ));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidConfig("bandwidth must be positive".into()));
    }
    let fit_at = |x0: f64| -> (f64, f64) {
        // Weighted least squares of y on (1, x - x0); intercept is the value.
        let (mut sw, mut swx, mut swx2, mut swy, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let u = (xi - x0) / bandwidth;
            let w = (-0.5 * u * u).exp();
            let d = xi - x0;
            sw += w;
            swx += w * d;
            swx2 += w * d * d;
            swy += w * yi;
            swxy += w * d * yi;
        }
        let det = sw * swx2 - swx * swx;
        if det.abs() < 1e-12 * (sw * swx2).abs().max(1e-300) {
            // Degenerate window: fall back to the weighted mean.
            return (swy / sw.max(1e-300), 1.0 / sw.max(1e-300));
        }
        let a = (swx2 * swy - swx * swxy) / det;
        // Variance factor of the intercept under homoskedastic noise:
        // e1' (X'WX)^-1 (X'W^2X) (X'WX)^-1 e1, with the Gaussian kernel
        // shortcut W^2 ~ W at half bandwidth left as a conservative W.
        let var_factor = swx2 / det;
        (a, var_factor)
    };
    // Residual scale from leave-nothing-out fitted values.
    let mut rss = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let (f, _) = fit_at(xi);
        rss += (yi - f) * (yi - f);
    }
    let sigma2 = rss / (x.len().max(3) - 2) as f64;
    Ok(grid
        .iter()
        .map(|&g| {
            let (est, var_factor) = fit_at(g);
            let se = (sigma2 * var_factor).max(0.0).sqrt();
            SmoothPoint {
                x: g,
                estimate: est,
                lower: est - 1.96 * se,
                upper: est + 1.96 * se,
            }
        })
        .collect())
}

/// Accumulated Gram system for least squares that never materializes the
/// design matrix: `X'X`, `X'y`, `y'y`, and the row count.
#[derive(Debug, Clone)]
pub struct Gram {
    p: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    n: usize,
}

/// Ordinary least squares solution extracted from a [`Gram`] system.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub rss: f64,
    pub n: usize,
    /// Unscaled inverse Gram matrix, row-major; multiply by `rss/(n-p)` for
    /// the classical coefficient covariance.
    pub xtx_inv: Vec<f64>,
}

impl Gram {
    pub fn new(p: usize) -> Self {
        Gram {
            p,
            xtx: vec![0.0; p * p],
            xty: vec![0.0; p],
            yty: 0.0,
            n: 0,
        }
    }

    pub fn add_row(&mut self, row: &[f64], y: f64) {
        debug_assert_eq!(row.len(), self.p);
        for i in 0..self.p {
            let ri = row[i];
            self.xty[i] += ri * y;
            for j in i..self.p {
                self.xtx[i * self.p + j] += ri * row[j];
            }
        }
        self.yty += y * y;
        self.n += 1;
    }

    /// Merge another accumulator over the same columns.
    pub fn merge(&mut self, other: &Gram) {
        assert_eq!(self.p, other.p);
        for (a, b) in self.xtx.iter_mut().zip(&other.xtx) {
            *a += *b;
        }
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            *a += *b;
        }
        self.yty += other.yty;
        self.n += other.n;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solve the normal equations restricted to `keep` columns.
    pub fn solve_subset(&self, keep: &[usize]) -> Result<OlsFit> {
        let k = keep.len();
        let mut a = nalgebra::DMatrix::zeros(k, k);
        let mut b = nalgebra::DVector::zeros(k);
        for (i, &ci) in keep.iter().enumerate() {
            b[i] = self.xty[ci];
            for (j, &cj) in keep.iter().enumerate() {
                let (lo, hi) = if ci <= cj { (ci, cj) } else { (cj, ci) };
                a[(i, j)] = self.xtx[lo * self.p + hi];
            }
        }
        let chol = a.clone().cholesky().ok_or_else(|| {
            Error::RankDeficient(format!("gram subset of {} columns is singular", k))
        })?;
        let coef = chol.solve(&b);
        let inv = chol.inverse();
        let fit_ss: f64 = coef.dot(&b);
        let rss = (self.yty - fit_ss).max(0.0);
        Ok(OlsFit {
            coefficients: coef.iter().copied().collect(),
            rss,
            n: self.n,
            xtx_inv: inv.iter().copied().collect(),
        })
    }

    pub fn solve(&self) -> Result<OlsFit> {
        self.solve_subset(&(0..self.p).collect::<Vec<_>>())
    }
}

impl OlsFit {
    /// Classical standard error of one coefficient.
    pub fn se(&self, j: usize) -> f64 {
        let p = (self.xtx_inv.len() as f64).sqrt() as usize;
        let dof = self.n.saturating_sub(p).max(1);
        (self.xtx_inv[j * p + j] * self.rss / dof as f64)
            .max(0.0)
            .sqrt()
    }

    /// Akaike information criterion under Gaussian errors, up to the constant
    /// that does not depend on the regressor set.
    pub fn aic(&self) -> f64 {
        let p = (self.xtx_inv.len() as f64).sqrt() as usize;
        let n = self.n as f64;
        n * (self.rss.max(1e-300) / n).ln() + 2.0 * (p as f64 + 1.0)
    }
}
