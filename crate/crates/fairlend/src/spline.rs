//! Natural cubic spline bases.
//!
//! The basis is the truncated-power construction with the natural (linear
//! beyond the boundary) constraints absorbed, then column-centered. For `k`
//! interior knots the basis has `k + 1` columns and spans every natural cubic
//! spline on the knot set up to constants; the constant is deliberately
//! excluded so the basis can sit next to an implicit intercept (a hazard
//! baseline or a regression intercept) without collinearity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

/// A frozen spline basis: knots plus the centering constants that were
/// computed from the values the spec was built on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    /// Strictly increasing interior knots.
    pub interior: Vec<f64>,
    /// `[min, max]` of the values the basis was built on.
    pub boundary: [f64; 2],
    /// Per-column means subtracted by [`SplineSpec::evaluate`].
    pub centers: Vec<f64>,
}

impl SplineSpec {
    /// Number of basis columns (`interior.len() + 1`).
    pub fn dim(&self) -> usize {
        self.interior.len() + 1
    }

    /// Build a basis with `df` columns from raw covariate values. Interior
    /// knots sit at the `i / df` quantiles (`i = 1..df-1`... strictly: `df-1`
    /// knots at equally spaced interpolating quantiles), boundary knots at
    /// the min and max.
    pub fn from_values(values: &[f64], df: usize) -> Result<Self> {
        if df < 2 {
            return Err(Error::InvalidConfig(format!(
                "spline df must be at least 2, got {df}"
            )));
        }
        if values.is_empty() {
            return Err(Error::DegenerateKnots("no values to place knots on".into()));
        }
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.len() != values.len() {
            return Err(Error::DegenerateKnots("values contain non-finite entries".into()));
        }
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if !(hi > lo) {
            return Err(Error::DegenerateKnots(format!(
                "cannot place knots: all values equal {lo}"
            )));
        }
        let k = df - 1;
        let mut interior = Vec::with_capacity(k);
        for i in 1..=k {
            interior.push(quantile_sorted(&sorted, i as f64 / (k + 1) as f64));
        }
        // Knots must be strictly increasing and strictly inside the boundary.
        let mut all = Vec::with_capacity(k + 2);
        all.push(lo);
        all.extend_from_slice(&interior);
        all.push(hi);
        for w in all.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::DegenerateKnots(format!(
                    "cannot place knots: coincident knots at {}",
                    w[0]
                )));
            }
        }
        let mut spec = SplineSpec {
            interior,
            boundary: [lo, hi],
            centers: vec![0.0; df],
        };
        // Column means over the originating values become the centers.
        let mut sums = vec![0.0; df];
        let mut buf = vec![0.0; df];
        for &v in values {
            spec.evaluate_into(v, &mut buf);
            for (s, b) in sums.iter_mut().zip(&buf) {
                *s += *b;
            }
        }
        for (c, s) in spec.centers.iter_mut().zip(&sums) {
            *c = *s / values.len() as f64;
        }
        Ok(spec)
    }

    /// Evaluate the centered basis at `x` into a fresh vector.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.evaluate_into(x, &mut out);
        out
    }

    /// Evaluate the centered basis at `x` into `out` (length [`dim`]).
    ///
    /// [`dim`]: SplineSpec::dim
    pub fn evaluate_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let last = self.boundary[1];
        // d_i(x) for knot xi: ((x - xi)+^3 - (x - last)+^3) / (last - xi).
        let cube = |v: f64| {
            let t = (x - v).max(0.0);
            t * t * t
        };
        let tail = cube(last);
        let d = |xi: f64| (cube(xi) - tail) / (last - xi);
        let m = self.interior.len();
        // Knots in order: boundary[0], interior..., boundary[1]. The basis is
        // x together with d_i - d_last_but_one over all knots except the
        // final boundary.
        let d_ref = if m == 0 {
            // No interior knots cannot happen (df >= 2), kept for safety.
            d(self.boundary[0])
        } else {
            d(self.interior[m - 1])
        };
        out[0] = x - self.centers[0];
        out[1] = d(self.boundary[0]) - d_ref - self.centers[1];
        for i in 0..m.saturating_sub(1) {
            out[i + 2] = d(self.interior[i]) - d_ref - self.centers[i + 2];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Gram;
    use proptest::prelude::*;

    fn uncentered(spec: &SplineSpec, x: f64) -> Vec<f64> {
        let mut v = spec.evaluate(x);
        for (vi, c) in v.iter_mut().zip(&spec.centers) {
            *vi += *c;
        }
        v
    }

    #[test]
    fn df4_on_1_to_100_places_quartile_knots() {
        let values: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let spec = SplineSpec::from_values(&values, 4).unwrap();
        assert_eq!(spec.dim(), 4);
        assert_eq!(spec.boundary, [1.0, 100.0]);
        assert_eq!(spec.interior, vec![25.75, 50.5, 75.25]);
    }

    #[test]
    fn df_below_two_is_rejected() {
        let values = [0.0, 1.0, 2.0];
        assert!(matches!(
            SplineSpec::from_values(&values, 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn constant_values_cannot_host_knots() {
        let values = [3.0; 20];
        assert!(matches!(
            SplineSpec::from_values(&values, 2),
            Err(Error::DegenerateKnots(_))
        ));
    }

    #[test]
    fn coincident_quantiles_are_rejected() {
        // 80% zeros: the 25/50/75 quantiles all hit 0 = the lower boundary.
        let mut values = vec![0.0; 80];
        values.extend((1..=20).map(|i| i as f64));
        assert!(matches!(
            SplineSpec::from_values(&values, 4),
            Err(Error::DegenerateKnots(_))
        ));
    }

    #[test]
    fn centering_makes_column_means_zero() {
        let values: Vec<f64> = (0..250).map(|i| (i as f64 * 0.37).sin() * 4.0 + 5.0).collect();
        let spec = SplineSpec::from_values(&values, 4).unwrap();
        let mut sums = vec![0.0; spec.dim()];
        for &v in &values {
            for (s, b) in sums.iter_mut().zip(spec.evaluate(v)) {
                *s += b;
            }
        }
        for s in sums {
            assert!(s.abs() / values.len() as f64 <= 1e-10);
        }
    }

    #[test]
    fn extrapolation_is_affine_beyond_both_boundaries() {
        let values: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let spec = SplineSpec::from_values(&values, 4).unwrap();
        for probes in [[101.0, 107.0, 113.0], [-20.0, -10.5, -1.0]] {
            let b: Vec<Vec<f64>> = probes.iter().map(|&x| spec.evaluate(x)).collect();
            let w = (probes[1] - probes[0]) / (probes[2] - probes[0]);
            for j in 0..spec.dim() {
                let interp = b[0][j] * (1.0 - w) + b[2][j] * w;
                assert!(
                    (b[1][j] - interp).abs() <= 1e-10 * (1.0 + interp.abs()),
                    "column {j} not affine outside the boundary"
                );
            }
        }
    }

    #[test]
    fn second_derivative_vanishes_at_boundaries() {
        let values: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let spec = SplineSpec::from_values(&values, 4).unwrap();
        let h = 1e-3;
        for x in [1.0, 100.0] {
            for j in 0..spec.dim() {
                let f = |x: f64| spec.evaluate(x)[j];
                let dd = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
                assert!(dd.abs() < 2e-2, "column {j} curves at boundary {x}: {dd}");
            }
        }
    }

    #[test]
    fn projecting_a_line_onto_the_basis_is_exact() {
        // Independent least-squares oracle: y = x must be reproduced by
        // intercept + basis because the first column is x itself.
        let values: Vec<f64> = (0..120).map(|i| 0.05 * i as f64).collect();
        let spec = SplineSpec::from_values(&values, 4).unwrap();
        let mut gram = Gram::new(spec.dim() + 1);
        let mut row = vec![0.0; spec.dim() + 1];
        for &v in &values {
            row[0] = 1.0;
            row[1..].copy_from_slice(&spec.evaluate(v));
            gram.add_row(&row, v);
        }
        let fit = gram.solve().unwrap();
        assert!(fit.rss <= 1e-10, "line not in span: rss = {}", fit.rss);
    }

    #[test]
    fn symmetric_knots_make_the_basis_closed_under_reflection() {
        // Knot layout symmetric under x -> 1 - x; the reflected basis must be
        // an affine transform of the original. Verified by brute-force least
        // squares of each reflected column on [1, basis(x)].
        let spec = SplineSpec {
            interior: vec![0.5],
            boundary: [0.0, 1.0],
            centers: vec![0.0, 0.0],
        };
        let grid: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        for j in 0..spec.dim() {
            let mut gram = Gram::new(spec.dim() + 1);
            for &x in &grid {
                let b = uncentered(&spec, x);
                let reflected = uncentered(&spec, 1.0 - x);
                let mut row = vec![1.0];
                row.extend(b);
                gram.add_row(&row, reflected[j]);
            }
            let fit = gram.solve().unwrap();
            assert!(
                fit.rss <= 1e-8,
                "reflected column {j} outside span: rss = {}",
                fit.rss
            );
        }
    }

    proptest! {
        #[test]
        fn basis_is_c2_at_interior_knots(seed in 0u64..500) {
            // Random strictly increasing knots in (0, 10).
            let a = 1.0 + (seed % 7) as f64 * 0.7;
            let b = a + 1.0 + (seed % 5) as f64 * 0.9;
            let spec = SplineSpec { interior: vec![a, b], boundary: [0.0, 10.0], centers: vec![0.0; 3] };
            let h = 1e-4;
            for &knot in &spec.interior {
                for j in 0..spec.dim() {
                    let f = |x: f64| spec.evaluate(x)[j];
                    // Jump of the second difference across the knot is O(h)
                    // when the second derivative is continuous.
                    let left = (f(knot - h) - 2.0 * f(knot - 2.0 * h) + f(knot - 3.0 * h)) / (h * h);
                    let right = (f(knot + 3.0 * h) - 2.0 * f(knot + 2.0 * h) + f(knot + h)) / (h * h);
                    prop_assert!((left - right).abs() < 0.3, "C2 break at {knot}: {left} vs {right}");
                }
            }
        }
    }
}
