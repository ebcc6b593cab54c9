//! Cyclic cubic regression splines on the 365-day calendar.
//!
//! The spline is parameterised by its values at `n` knots on one period.
//! Second derivatives at the knots follow from the cyclic continuity
//! conditions `B·δ = D·β`, so every basis function is a linear map of the
//! knot values and the fitted curve is C² everywhere, including across the
//! wrap from day 365 to day 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PERIOD: f64 = 365.0;
pub const DEFAULT_N_BASIS: usize = 10;

/// Knot layout and the knot-value → second-derivative map.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicBasis {
    knots: Vec<f64>,
    widths: Vec<f64>,
    /// `δ = curvature · β`
    curvature: DMatrix<f64>,
}

impl CyclicBasis {
    /// `n` evenly spaced knots starting at day 1.
    pub fn even(n: usize) -> Result<Self> {
        let knots = (0..n).map(|j| 1.0 + PERIOD * j as f64 / n as f64).collect();
        Self::new(knots)
    }

    pub fn new(knots: Vec<f64>) -> Result<Self> {
        let n = knots.len();
        if n < 4 {
            return Err(Error::Validation(format!(
                "cyclic basis needs at least 4 knots, got {n}"
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("knots must be finite and strictly increasing".into()));
        }
        if knots[n - 1] - knots[0] >= PERIOD {
            return Err(Error::Validation("knots must lie within one period".into()));
        }
        let widths: Vec<f64> = (0..n)
            .map(|j| {
                if j + 1 < n {
                    knots[j + 1] - knots[j]
                } else {
                    knots[0] + PERIOD - knots[j]
                }
            })
            .collect();

        let mut b = DMatrix::zeros(n, n);
        let mut d = DMatrix::zeros(n, n);
        for j in 0..n {
            let prev = (j + n - 1) % n;
            let next = (j + 1) % n;
            let (hp, hj) = (widths[prev], widths[j]);
            b[(j, prev)] += hp / 6.0;
            b[(j, j)] += (hp + hj) / 3.0;
            b[(j, next)] += hj / 6.0;
            d[(j, prev)] += 1.0 / hp;
            d[(j, j)] -= 1.0 / hp + 1.0 / hj;
            d[(j, next)] += 1.0 / hj;
        }
        // B is strictly diagonally dominant, hence invertible
        let curvature = b
            .lu()
            .solve(&d)
            .ok_or_else(|| Error::RankDeficient("cyclic curvature system".into()))?;
        Ok(Self {
            knots,
            widths,
            curvature,
        })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Interval index and local coordinates `(a, c)` with `a + c = 1`.
    fn locate(&self, x: f64) -> (usize, f64, f64) {
        let k0 = self.knots[0];
        let u = k0 + (x - k0).rem_euclid(PERIOD);
        let j = self.knots.partition_point(|&k| k <= u).saturating_sub(1);
        let h = self.widths[j];
        let c = ((u - self.knots[j]) / h).clamp(0.0, 1.0);
        (j, 1.0 - c, c)
    }

    /// Values of all basis functions at `x` (any real; wrapped onto the period).
    pub fn weights(&self, x: f64) -> Vec<f64> {
        let n = self.len();
        let (j, a, c) = self.locate(x);
        let next = (j + 1) % n;
        let h2 = self.widths[j] * self.widths[j] / 6.0;
        let (ca, cc) = ((a * a * a - a) * h2, (c * c * c - c) * h2);
        let mut w: Vec<f64> = (0..n)
            .map(|k| ca * self.curvature[(j, k)] + cc * self.curvature[(next, k)])
            .collect();
        w[j] += a;
        w[next] += c;
        w
    }

    pub fn eval(&self, coefficients: &[f64], x: f64) -> f64 {
        self.weights(x).iter().zip(coefficients).map(|(w, b)| w * b).sum()
    }
}

/// Fitted positive seasonal scale `f(d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScaleRepr", into = "ScaleRepr")]
pub struct CyclicScale {
    basis: CyclicBasis,
    coefficients: Vec<f64>,
    floor: f64,
    /// `f(d)` for `d = 1..=365`
    table: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScaleRepr {
    knots: Vec<f64>,
    coefficients: Vec<f64>,
    floor: f64,
}

impl TryFrom<ScaleRepr> for CyclicScale {
    type Error = Error;

    fn try_from(r: ScaleRepr) -> Result<Self> {
        Self::from_parts(r.knots, r.coefficients, r.floor)
    }
}

impl From<CyclicScale> for ScaleRepr {
    fn from(s: CyclicScale) -> Self {
        ScaleRepr {
            knots: s.basis.knots,
            coefficients: s.coefficients,
            floor: s.floor,
        }
    }
}

impl CyclicScale {
    pub fn from_parts(knots: Vec<f64>, coefficients: Vec<f64>, floor: f64) -> Result<Self> {
        let basis = CyclicBasis::new(knots)?;
        if coefficients.len() != basis.len() {
            return Err(Error::Validation(format!(
                "{} coefficients for {} knots",
                coefficients.len(),
                basis.len()
            )));
        }
        if !(floor.is_finite() && floor > 0.0) {
            return Err(Error::Validation(format!("floor {floor} must be > 0")));
        }
        let mut scale = Self {
            basis,
            coefficients,
            floor,
            table: Vec::new(),
        };
        scale.table = (1..=PERIOD as u16).map(|d| scale.eval(f64::from(d))).collect();
        Ok(scale)
    }

    /// Constant scale `c` on `n_basis` even knots.
    pub fn constant(c: f64, n_basis: usize) -> Result<Self> {
        Self::from_parts(CyclicBasis::even(n_basis)?.knots, vec![c; n_basis], c * 1e-6)
    }

    /// Ordinary least squares of `values` on the basis at `days`, floored at
    /// `floor`. Errors if the design is numerically rank deficient.
    pub fn fit(basis: CyclicBasis, days: &[f64], values: &[f64], floor: f64) -> Result<Self> {
        let n = basis.len();
        let m = days.len();
        assert_eq!(m, values.len());
        if m < n {
            return Err(Error::InsufficientData(format!("{m} points for {n} basis functions")));
        }
        let mut x = DMatrix::zeros(m, n);
        for (i, &d) in days.iter().enumerate() {
            for (k, w) in basis.weights(d).into_iter().enumerate() {
                x[(i, k)] = w;
            }
        }
        let y = DVector::from_column_slice(values);
        let svd = x.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin.is_nan() || smin <= 1e-10 * smax {
            return Err(Error::RankDeficient(format!(
                "singular values span [{smin:e}, {smax:e}] over {n} basis functions"
            )));
        }
        let beta = svd.solve(&y, 0.0).map_err(|e| Error::RankDeficient(e.to_string()))?;
        Self::from_parts(basis.knots, beta.iter().copied().collect(), floor)
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    pub fn knots(&self) -> &[f64] {
        self.basis.knots()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Unclamped spline value.
    pub fn raw(&self, x: f64) -> f64 {
        self.basis.eval(&self.coefficients, x)
    }

    /// `f(x) = max(spline(x), floor)`.
    pub fn eval(&self, x: f64) -> f64 {
        self.raw(x).max(self.floor)
    }

    /// `f(d)` for a calendar day in `1..=365`.
    pub fn at_day(&self, d: u16) -> f64 {
        self.table[usize::from(d) - 1]
    }

    /// Multiply the curve (and its floor) by `c > 0`.
    pub fn scaled(self, c: f64) -> Self {
        assert!(c > 0.0 && c.is_finite(), "scale factor {c}");
        let coefficients = self.coefficients.iter().map(|b| b * c).collect();
        let mut scale = Self {
            coefficients,
            floor: self.floor * c,
            ..self
        };
        scale.table = (1..=PERIOD as u16).map(|d| scale.eval(f64::from(d))).collect();
        scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_form_partition_of_unity() {
        let basis = CyclicBasis::even(10).unwrap();
        for i in 0..730 {
            let x = 0.5 * i as f64;
            let s: f64 = basis.weights(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "x={x} sum={s}");
        }
    }

    #[test]
    fn interpolates_knot_values() {
        let basis = CyclicBasis::even(8).unwrap();
        let beta: Vec<f64> = (0..8).map(|k| (k as f64).sin() + 2.0).collect();
        for (k, &knot) in basis.knots().iter().enumerate() {
            assert!((basis.eval(&beta, knot) - beta[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn periodic_and_smooth_across_wrap() {
        let basis = CyclicBasis::even(10).unwrap();
        let beta = [1.0, 3.0, 0.5, 2.0, 2.5, 1.0, 4.0, 0.2, 1.5, 2.2];
        let f = |x: f64| basis.eval(&beta, x);
        for d in 1..=365 {
            let x = d as f64;
            assert_eq!(f(x), f(x + PERIOD));
        }
        // wrap point sits at knot 1 ≡ 366
        let h = 1e-3;
        let left = |x: f64| {
            (
                f(x),
                (f(x) - f(x - h)) / h,
                (f(x) - 2.0 * f(x - h) + f(x - 2.0 * h)) / (h * h),
            )
        };
        let right = |x: f64| {
            (
                f(x),
                (f(x + h) - f(x)) / h,
                (f(x + 2.0 * h) - 2.0 * f(x + h) + f(x)) / (h * h),
            )
        };
        let (l0, l1, l2) = left(366.0 - 1e-9);
        let (r0, r1, r2) = right(1.0);
        assert!((l0 - r0).abs() < 1e-6);
        assert!((l1 - r1).abs() < 1e-2, "{l1} {r1}");
        assert!((l2 - r2).abs() < 5e-2, "{l2} {r2}");
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(CyclicBasis::new(vec![1.0, 2.0, 3.0]).is_err());
        assert!(CyclicBasis::new(vec![1.0, 3.0, 2.0, 4.0]).is_err());
        assert!(CyclicBasis::new(vec![1.0, 100.0, 200.0, 366.0]).is_err());
    }

    #[test]
    fn fit_rank_deficient_when_days_cluster() {
        let basis = CyclicBasis::even(10).unwrap();
        let days = vec![10.0; 50];
        let values = vec![1.0; 50];
        assert!(matches!(
            CyclicScale::fit(basis, &days, &values, 1e-6),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn serde_roundtrip_is_exact() {
        let basis = CyclicBasis::even(10).unwrap();
        let days: Vec<f64> = (0..200).map(|i| (i * 37 % 365 + 1) as f64).collect();
        let values: Vec<f64> = days.iter().map(|d| 2.0 + (d / 50.0).sin()).collect();
        let s = CyclicScale::fit(basis, &days, &values, 1e-6).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: CyclicScale = serde_json::from_str(&json).unwrap();
        for d in 1..=365u16 {
            assert_eq!(s.at_day(d).to_bits(), back.at_day(d).to_bits());
        }
    }
}
