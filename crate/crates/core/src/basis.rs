//! B-spline basis on the age axis and the log-baseline hazard built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_N_BASIS: usize = 9;

/// Clamped B-spline basis with boundary knots repeated `degree + 1` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub degree: usize,
    pub interior_knots: Vec<f64>,
    pub boundary: (f64, f64),
}

impl SplineBasis {
    pub fn new(degree: usize, interior_knots: Vec<f64>, boundary: (f64, f64)) -> Result<Self> {
        let (lo, hi) = boundary;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInterval { a: lo, b: hi });
        }
        if interior_knots.windows(2).any(|w| !(w[0] < w[1]))
            || interior_knots.iter().any(|&k| !(k > lo && k < hi))
        {
            return Err(Error::Config(format!(
                "interior knots {interior_knots:?} must be strictly increasing inside ({lo}, {hi})"
            )));
        }
        Ok(SplineBasis {
            degree,
            interior_knots,
            boundary,
        })
    }

    /// Basis dimension: interior knots + degree + 1.
    pub fn dim(&self) -> usize {
        self.interior_knots.len() + self.degree + 1
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.boundary.0 && t <= self.boundary.1
    }

    pub fn knot_vector(&self) -> Vec<f64> {
        let p = self.degree;
        let mut u = Vec::with_capacity(self.dim() + p + 1);
        u.extend(std::iter::repeat_n(self.boundary.0, p + 1));
        u.extend_from_slice(&self.interior_knots);
        u.extend(std::iter::repeat_n(self.boundary.1, p + 1));
        u
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutsideSupport {
                age: t,
                lo: self.boundary.0,
                hi: self.boundary.1,
            })
        }
    }

    /// Writes the `degree + 1` possibly-nonzero basis values at `t` into `out`
    /// and returns the index of the first of them.
    pub fn eval_nonzero(&self, t: f64, out: &mut [f64]) -> Result<usize> {
        self.check(t)?;
        let p = self.degree;
        let k = &self.interior_knots;
        // span among [lo, k_1), [k_1, k_2), ..., [k_m, hi]
        let span = k.partition_point(|&x| x <= t);
        let u = |i: isize| -> f64 {
            // knot vector index i, with p+1 copies of each boundary
            let i = i - (p as isize + 1);
            if i < 0 {
                self.boundary.0
            } else if (i as usize) < k.len() {
                k[i as usize]
            } else {
                self.boundary.1
            }
        };
        let i = (span + p) as isize;
        let n = &mut out[..=p];
        n[0] = 1.0;
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        assert!(p < 16, "spline degree too large");
        for j in 1..=p {
            left[j] = t - u(i + 1 - j as isize);
            right[j] = u(i + j as isize) - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok(span)
    }

    /// Full basis vector at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut nz = vec![0.0; self.degree + 1];
        let start = self.eval_nonzero(t, &mut nz)?;
        let mut out = vec![0.0; self.dim()];
        out[start..start + nz.len()].copy_from_slice(&nz);
        Ok(out)
    }

    /// Log baseline hazard: dot product of the basis at `t` with `coeffs`.
    pub fn log_h0(&self, coeffs: &[f64], t: f64) -> Result<f64> {
        if coeffs.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "baseline coefficients",
                expected: self.dim(),
                actual: coeffs.len(),
            });
        }
        let mut nz = [0.0; 16];
        let start = self.eval_nonzero(t, &mut nz)?;
        Ok(nz[..=self.degree]
            .iter()
            .zip(&coeffs[start..])
            .map(|(b, c)| b * c)
            .sum())
    }

    /// Cubic basis with interior knots at equally spaced empirical quantiles of
    /// the observed event ages. The knot count shrinks when there are too few
    /// distinct event ages.
    pub fn from_event_quantiles(
        event_ages: &[f64],
        n_basis: usize,
        degree: usize,
        boundary: (f64, f64),
    ) -> Result<Self> {
        if event_ages.is_empty() {
            return Err(Error::NoEvents);
        }
        if n_basis < degree + 1 {
            return Err(Error::Config(format!(
                "basis dimension {n_basis} below degree + 1 = {}",
                degree + 1
            )));
        }
        let mut k = n_basis - degree - 1;
        if event_ages.len() < k {
            log::warn!(
                "{} events for {k} requested interior knots; reducing knot count",
                event_ages.len()
            );
            k = event_ages.len();
        }
        let mut sorted = event_ages.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut knots: Vec<f64> = (1..=k)
            .map(|j| quantile_sorted(&sorted, j as f64 / (k + 1) as f64))
            .filter(|&x| x > boundary.0 && x < boundary.1)
            .collect();
        knots.dedup();
        if knots.len() < k {
            log::warn!(
                "event-age quantiles collapse: {} distinct interior knots instead of {k}",
                knots.len()
            );
        }
        SplineBasis::new(degree, knots, boundary)
    }
}

/// Default baseline basis: cubic, knots at event-age quantiles, boundary spanning
/// the earliest entry and the latest exit.
pub fn default_knots(event_ages: &[f64], n_basis: usize, boundary: (f64, f64)) -> Result<SplineBasis> {
    SplineBasis::from_event_quantiles(event_ages, n_basis, DEFAULT_DEGREE, boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight-line Cox–de Boor recursion over the full knot vector.
    fn cox_de_boor(u: &[f64], i: usize, p: usize, t: f64, last: bool) -> f64 {
        if p == 0 {
            let inside = if last {
                // right-closed last non-degenerate span
                u[i] < u[i + 1] && t >= u[i] && t <= u[i + 1] && u[i + 1] == *u.last().unwrap()
            } else {
                false
            };
            return if (t >= u[i] && t < u[i + 1]) || inside { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = u[i + p] - u[i];
        if d1 > 0.0 {
            v += (t - u[i]) / d1 * cox_de_boor(u, i, p - 1, t, last);
        }
        let d2 = u[i + p + 1] - u[i + 1];
        if d2 > 0.0 {
            v += (u[i + p + 1] - t) / d2 * cox_de_boor(u, i + 1, p - 1, t, last);
        }
        v
    }

    fn oracle(basis: &SplineBasis, t: f64) -> Vec<f64> {
        let u = basis.knot_vector();
        let last = t == basis.boundary.1;
        (0..basis.dim())
            .map(|i| cox_de_boor(&u, i, basis.degree, t, last))
            .collect()
    }

    #[test]
    fn degree_zero_indicator() {
        let b = SplineBasis::new(0, vec![45.0], (40.0, 74.0)).unwrap();
        assert_eq!(b.eval(42.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval(74.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn matches_recursion_at_55() {
        let b = SplineBasis::new(3, vec![50.0, 60.0], (40.0, 74.0)).unwrap();
        let got = b.eval(55.0).unwrap();
        let want = oracle(&b, 55.0);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn outside_support_is_error() {
        let b = SplineBasis::new(3, vec![50.0], (40.0, 74.0)).unwrap();
        assert!(matches!(b.eval(39.99), Err(Error::OutsideSupport { .. })));
        assert!(matches!(b.eval(74.01), Err(Error::OutsideSupport { .. })));
    }

    #[test]
    fn log_h0_constant_and_zero() {
        let b = SplineBasis::new(3, vec![50.0, 55.0, 60.0], (40.0, 80.0)).unwrap();
        let zero = vec![0.0; b.dim()];
        let c = vec![-3.7; b.dim()];
        for t in [40.0, 47.3, 55.0, 79.9, 80.0] {
            assert_eq!(b.log_h0(&zero, t).unwrap(), 0.0);
            assert!((b.log_h0(&c, t).unwrap() + 3.7).abs() < 1e-14);
        }
        assert!(matches!(
            b.log_h0(&[0.0; 3], 50.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn log_h0_matches_dot_product_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let b = SplineBasis::new(3, vec![48.0, 55.5, 63.0], (40.0, 80.0)).unwrap();
        let coeffs: Vec<f64> = (0..b.dim()).map(|_| rng.random_range(-5.0..5.0)).collect();
        for _ in 0..100 {
            let t = rng.random_range(40.0..80.0);
            let full = oracle(&b, t);
            let want: f64 = full.iter().zip(&coeffs).map(|(x, c)| x * c).sum();
            assert!((b.log_h0(&coeffs, t).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn default_knot_placement() {
        let b = default_knots(&[55.0, 60.0, 65.0], 4, (40.0, 80.0)).unwrap();
        assert!(b.interior_knots.is_empty());
        assert_eq!(b.dim(), 4);

        // quantile oracle for uniformly spread event ages on [50, 70]
        let ages: Vec<f64> = (0..21).map(|i| 50.0 + i as f64).collect();
        let b = default_knots(&ages, 6, (40.0, 80.0)).unwrap();
        let q = |p: f64| {
            let h = 20.0 * p;
            let lo = h.floor();
            50.0 + lo + (h - lo)
        };
        assert_eq!(b.interior_knots.len(), 2);
        assert!((b.interior_knots[0] - q(1.0 / 3.0)).abs() < 1e-12);
        assert!((b.interior_knots[1] - q(2.0 / 3.0)).abs() < 1e-12);

        let b = default_knots(&[60.0; 10], 9, (40.0, 80.0)).unwrap();
        assert_eq!(b.interior_knots, vec![60.0]);
        assert!(matches!(default_knots(&[], 9, (40.0, 80.0)), Err(Error::NoEvents)));
    }

    #[test]
    fn cubic_is_continuously_differentiable_across_knots() {
        let b = SplineBasis::new(3, vec![50.0, 60.0], (40.0, 74.0)).unwrap();
        let h = 1e-6;
        for &k in &b.interior_knots {
            let l = b.eval(k - h).unwrap();
            let c = b.eval(k).unwrap();
            let r = b.eval(k + h).unwrap();
            for q in 0..b.dim() {
                let dl = (c[q] - l[q]) / h;
                let dr = (r[q] - c[q]) / h;
                assert!(dl.abs() < 10.0 && dr.abs() < 10.0);
                assert!((dl - dr).abs() < 1e-3);
            }
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(t in 40.0f64..=74.0, degree in 0usize..5) {
            let b = SplineBasis::new(degree, vec![45.0, 52.5, 61.0, 70.0], (40.0, 74.0)).unwrap();
            let v = b.eval(t).unwrap();
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let o = oracle(&b, t);
            for (g, w) in v.iter().zip(&o) {
                prop_assert!((g - w).abs() < 1e-12);
            }
        }

        #[test]
        fn log_h0_is_linear(t in 40.0f64..80.0, a in -3.0f64..3.0, c in -3.0f64..3.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = SplineBasis::new(3, vec![50.0, 65.0], (40.0, 80.0)).unwrap();
            let c1: Vec<f64> = (0..b.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c2: Vec<f64> = (0..b.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mix: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| a * x + c * y).collect();
            let lhs = b.log_h0(&mix, t).unwrap();
            let rhs = a * b.log_h0(&c1, t).unwrap() + c * b.log_h0(&c2, t).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
