//! Prediction intervals `ŷ* ± δ · se` for every model family.
//!
//! The half-width is exactly `δ · se`. Bounds are then clamped to the support
//! of the family: `[0, n*]` for binomial counts, `[0, ∞)` for Poisson counts,
//! unclamped for Gaussian responses. For a one-sided bound the omitted side
//! is the support limit, i.e. `±∞` for Gaussian data.

use serde::Serialize;

use crate::data::Alternative;
use crate::error::{Error, Result};
use crate::fitting::{BetaBinomialFit, LmmFit, QuasiBinomialFit, QuasiPoissonFit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalRow {
    pub m_index: usize,
    pub y_hat_star: f64,
    pub pred_se: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_clamped: bool,
    pub upper_clamped: bool,
}

/// Closed support `[lo, hi]` of one future observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Support {
    pub lo: f64,
    pub hi: f64,
}

impl Support {
    pub const REAL_LINE: Support = Support {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    pub const NONNEGATIVE: Support = Support {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn binomial(size: u64) -> Self {
        Support {
            lo: 0.0,
            hi: size as f64,
        }
    }
}

/// Raw bounds before clamping; the omitted side of a one-sided bound is infinite.
#[inline]
pub fn raw_bounds(center: f64, se: f64, delta: f64, alt: Alternative) -> (f64, f64) {
    let half = delta * se;
    let lower = match alt {
        Alternative::Upper => f64::NEG_INFINITY,
        _ => center - half,
    };
    let upper = match alt {
        Alternative::Lower => f64::INFINITY,
        _ => center + half,
    };
    (lower, upper)
}

/// Builds one clamped interval.
pub fn interval(
    m_index: usize,
    center: f64,
    se: f64,
    delta: f64,
    alt: Alternative,
    support: Support,
) -> IntervalRow {
    let (lower, upper) = raw_bounds(center, se, delta, alt);
    IntervalRow {
        m_index,
        y_hat_star: center,
        pred_se: se,
        lower: lower.max(support.lo),
        upper: upper.min(support.hi),
        lower_clamped: lower < support.lo,
        upper_clamped: upper > support.hi,
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta >= 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::out_of_range("delta", delta, "must be finite and nonnegative"))
    }
}

/// `√(φ̂ n* π̂(1-π̂)(1 + n*/N))`.
pub fn quasi_binomial_se(fit: &QuasiBinomialFit, size: u64) -> f64 {
    let n = size as f64;
    let p = fit.pi_hat;
    (fit.phi_hat * n * p * (1.0 - p) * (1.0 + n / fit.total as f64)).sqrt()
}

/// `√(n*π̂(1-π̂)[1+(n*-1)ρ̂] + n*²π̂(1-π̂)/N + (N-1)/N · n*²π̂(1-π̂)ρ̂)`.
pub fn beta_binomial_se(fit: &BetaBinomialFit, size: u64) -> f64 {
    let n = size as f64;
    let big_n = fit.total as f64;
    let v = fit.pi_hat * (1.0 - fit.pi_hat);
    let rho = fit.rho_hat;
    let future = n * v * (1.0 + (n - 1.0) * rho);
    let estimate = n * n * v / big_n + (big_n - 1.0) / big_n * n * n * v * rho;
    (future + estimate).sqrt()
}

/// `√(φ̂ λ̂ (1 + 1/H))`.
pub fn quasi_poisson_se(fit: &QuasiPoissonFit) -> f64 {
    (fit.phi_hat * fit.lambda_hat * (1.0 + 1.0 / fit.n_clusters as f64)).sqrt()
}

pub fn quasi_binomial_intervals(
    fit: &QuasiBinomialFit,
    sizes: &[u64],
    delta: f64,
    alt: Alternative,
) -> Result<Vec<IntervalRow>> {
    check_delta(delta)?;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let center = n as f64 * fit.pi_hat;
            interval(m, center, quasi_binomial_se(fit, n), delta, alt, Support::binomial(n))
        })
        .collect())
}

pub fn beta_binomial_intervals(
    fit: &BetaBinomialFit,
    sizes: &[u64],
    delta: f64,
    alt: Alternative,
) -> Result<Vec<IntervalRow>> {
    check_delta(delta)?;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let center = n as f64 * fit.pi_hat;
            interval(m, center, beta_binomial_se(fit, n), delta, alt, Support::binomial(n))
        })
        .collect())
}

/// `M` identical rows around `λ̂`.
pub fn quasi_poisson_interval(
    fit: &QuasiPoissonFit,
    m: usize,
    delta: f64,
    alt: Alternative,
) -> Result<Vec<IntervalRow>> {
    check_delta(delta)?;
    let se = quasi_poisson_se(fit);
    Ok((0..m)
        .map(|i| interval(i, fit.lambda_hat, se, delta, alt, Support::NONNEGATIVE))
        .collect())
}

/// `M` identical rows around `μ̂`.
pub fn lmm_interval(fit: &LmmFit, m: usize, delta: f64, alt: Alternative) -> Result<Vec<IntervalRow>> {
    check_delta(delta)?;
    let se = fit.pred_se();
    Ok((0..m)
        .map(|i| interval(i, fit.mu_hat, se, delta, alt, Support::REAL_LINE))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClusteredBinomial;
    use crate::data::ClusteredCounts;
    use crate::fitting::{fit_beta_binomial, fit_quasi_binomial, fit_quasi_poisson};

    fn qb_dat1() -> ClusteredBinomial {
        let succ = [0, 9, 13, 1, 4, 5, 13, 7, 7, 6];
        ClusteredBinomial::from_counts(&succ, &[50; 10]).unwrap()
    }

    fn qp_dat1() -> QuasiPoissonFit {
        fit_quasi_poisson(&ClusteredCounts::new(vec![46, 62, 30, 59, 74, 53, 32, 27, 59, 47]).unwrap())
            .unwrap()
    }

    #[test]
    fn zero_delta_collapses_to_centers() {
        let fit = fit_quasi_binomial(&qb_dat1()).unwrap();
        let rows = quasi_binomial_intervals(&fit, &[40, 50, 60], 0.0, Alternative::Both).unwrap();
        for (row, want) in rows.iter().zip([5.2, 6.5, 7.8]) {
            assert!((row.y_hat_star - want).abs() < 1e-12);
            assert_eq!(row.lower, row.upper);
        }
    }

    #[test]
    fn quasi_binomial_size_fifty() {
        // Independent arithmetic: Pearson χ² = Σ(y-6.5)²/(50·0.13·0.87) = 172.5/5.655.
        let phi: f64 = 172.5 / 5.655 / 9.0;
        let oracle = (phi * 5.655 * (1.0 + 50.0 / 500.0)).sqrt();
        let fit = fit_quasi_binomial(&qb_dat1()).unwrap();
        let row = quasi_binomial_intervals(&fit, &[50], 1.96, Alternative::Both).unwrap()[0];
        assert!((row.pred_se - oracle).abs() < 1e-9);
        assert!((row.pred_se - 4.5918).abs() < 1e-3);
        assert_eq!(row.lower, 0.0);
        assert!(row.lower_clamped);
        assert!((row.upper - 15.50).abs() < 5e-3);
    }

    #[test]
    fn quasi_binomial_se_increases_with_size() {
        let fit = fit_quasi_binomial(&qb_dat1()).unwrap();
        let rows = quasi_binomial_intervals(&fit, &[40, 50, 60], 1.0, Alternative::Both).unwrap();
        assert!(rows[0].pred_se < rows[1].pred_se && rows[1].pred_se < rows[2].pred_se);
    }

    #[test]
    fn beta_binomial_plug_in() {
        let fit = fit_beta_binomial(&qb_dat1()).unwrap();
        let row = beta_binomial_intervals(&fit, &[50], 1.0, Alternative::Both).unwrap()[0];
        assert!((row.pred_se - 5.765).abs() < 0.01, "{}", row.pred_se);
        assert!((row.lower - 0.735).abs() < 0.01 && (row.upper - 12.265).abs() < 0.01);
    }

    #[test]
    fn beta_binomial_binomial_limit() {
        let fit = BetaBinomialFit {
            pi_hat: 0.3,
            rho_hat: 0.0,
            total: u64::MAX / 4,
            n_clusters: 10,
            sizes: vec![],
        };
        let se = beta_binomial_se(&fit, 20);
        assert!((se * se - 20.0 * 0.3 * 0.7).abs() < 1e-6);
    }

    #[test]
    fn quasi_poisson_reference_bounds() {
        let fit = qp_dat1();
        let row = quasi_poisson_interval(&fit, 1, 2.253848, Alternative::Both).unwrap()[0];
        assert!((row.lower - 12.30559).abs() < 1e-3 && (row.upper - 85.49441).abs() < 1e-3);
        let rows = quasi_poisson_interval(&fit, 3, 3.092852, Alternative::Both).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].lower, 0.0);
        assert!((rows[0].upper - 99.11683).abs() < 1e-3);
        let flat = quasi_poisson_interval(&fit, 1, 0.0, Alternative::Both).unwrap()[0];
        assert_eq!((flat.lower, flat.upper), (48.9, 48.9));
    }

    #[test]
    fn one_sided_bounds_use_support_limits() {
        let fit = fit_quasi_binomial(&qb_dat1()).unwrap();
        let both = quasi_binomial_intervals(&fit, &[50], 1.0, Alternative::Both).unwrap()[0];
        let upper = quasi_binomial_intervals(&fit, &[50], 1.0, Alternative::Upper).unwrap()[0];
        let lower = quasi_binomial_intervals(&fit, &[50], 1.0, Alternative::Lower).unwrap()[0];
        assert_eq!((upper.lower, upper.upper), (0.0, both.upper));
        assert_eq!((lower.lower, lower.upper), (both.lower, 50.0));
        let g = interval(0, 10.0, 2.0, 1.5, Alternative::Upper, Support::REAL_LINE);
        assert_eq!((g.lower, g.upper), (f64::NEG_INFINITY, 13.0));
    }

    #[test]
    fn negative_delta_rejected() {
        assert!(quasi_poisson_interval(&qp_dat1(), 1, -1.0, Alternative::Both).is_err());
    }
}
