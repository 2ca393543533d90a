//! Parameter estimation from historical data: moment estimators for the
//! overdispersed count models and REML for random-intercept models.
//!
//! Both count-model dispersion estimators are Pearson statistics of the intercept-only
//! fit divided by the residual degrees of freedom `H - 1`, floored at 1.

mod reml;

pub use reml::{
    fit_random_intercepts, fit_random_intercepts_with, LmmFit, RemlEstimate, RemlOptions,
    RemlProblem,
};

use serde::Serialize;

use crate::data::{ClusteredBinomial, ClusteredCounts};
use crate::error::{Error, Result};

/// Bounds applied to the intraclass correlation estimate.
pub const RHO_HAT_MIN: f64 = 1e-6;
pub const RHO_HAT_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasiBinomialFit {
    pub pi_hat: f64,
    pub phi_hat: f64,
    pub total: u64,
    pub n_clusters: usize,
    pub sizes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaBinomialFit {
    pub pi_hat: f64,
    pub rho_hat: f64,
    pub total: u64,
    pub n_clusters: usize,
    pub sizes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasiPoissonFit {
    pub lambda_hat: f64,
    pub phi_hat: f64,
    pub n_clusters: usize,
}

fn pooled_proportion(data: &ClusteredBinomial) -> Result<f64> {
    let successes = data.total_successes();
    if successes == 0 {
        return Err(Error::DegenerateData("no successes in any cluster"));
    }
    if successes == data.total() {
        return Err(Error::DegenerateData("no failures in any cluster"));
    }
    Ok(successes as f64 / data.total() as f64)
}

/// `π̂ = Σy/N`, `φ̂ = max(1, Pearson χ² / (H-1))`.
pub fn fit_quasi_binomial(data: &ClusteredBinomial) -> Result<QuasiBinomialFit> {
    let pi = pooled_proportion(data)?;
    let pearson: f64 = data
        .clusters()
        .iter()
        .map(|c| {
            let n = c.size() as f64;
            let expected = n * pi;
            (c.successes as f64 - expected).powi(2) / (expected * (1.0 - pi))
        })
        .sum();
    let phi = pearson / (data.n_clusters() - 1) as f64;
    Ok(QuasiBinomialFit {
        pi_hat: pi,
        phi_hat: phi.max(1.0),
        total: data.total(),
        n_clusters: data.n_clusters(),
        sizes: data.sizes(),
    })
}

/// `π̂ = Σy/N` and the one-way ANOVA intraclass correlation estimate.
///
/// `ρ̂ = (MSB - MSW) / (MSB + (n0 - 1) MSW)` with
/// `MSB = Σ n_h (p_h - π̂)² / (H-1)`, `MSW = Σ n_h p_h (1-p_h) / (N-H)` and
/// `n0 = (N - Σ n_h²/N) / (H-1)`, clamped to `[RHO_HAT_MIN, RHO_HAT_MAX]`.
pub fn fit_beta_binomial(data: &ClusteredBinomial) -> Result<BetaBinomialFit> {
    let pi = pooled_proportion(data)?;
    let h = data.n_clusters() as f64;
    let n_total = data.total() as f64;
    if data.total() == data.n_clusters() as u64 {
        return Err(Error::InvalidData(
            "intraclass correlation needs at least one cluster with more than one unit".into(),
        ));
    }
    let (mut between, mut within, mut sum_sq_sizes) = (0.0, 0.0, 0.0);
    for c in data.clusters() {
        let n = c.size() as f64;
        let p = c.successes as f64 / n;
        between += n * (p - pi).powi(2);
        within += n * p * (1.0 - p);
        sum_sq_sizes += n * n;
    }
    let msb = between / (h - 1.0);
    let msw = within / (n_total - h);
    let n0 = (n_total - sum_sq_sizes / n_total) / (h - 1.0);
    let denom = msb + (n0 - 1.0) * msw;
    let rho = if denom > 0.0 {
        (msb - msw) / denom
    } else {
        RHO_HAT_MAX
    };
    Ok(BetaBinomialFit {
        pi_hat: pi,
        rho_hat: rho.clamp(RHO_HAT_MIN, RHO_HAT_MAX),
        total: data.total(),
        n_clusters: data.n_clusters(),
        sizes: data.sizes(),
    })
}

/// `λ̂ = mean(y)`, `φ̂ = max(1, Σ (y - λ̂)² / λ̂ / (H-1))`.
pub fn fit_quasi_poisson(data: &ClusteredCounts) -> Result<QuasiPoissonFit> {
    let h = data.n_clusters();
    let total: u64 = data.counts().iter().sum();
    if total == 0 {
        return Err(Error::DegenerateData("all counts are zero"));
    }
    let lambda = total as f64 / h as f64;
    let pearson: f64 = data
        .counts()
        .iter()
        .map(|&y| (y as f64 - lambda).powi(2) / lambda)
        .sum();
    let phi = pearson / (h - 1) as f64;
    Ok(QuasiPoissonFit {
        lambda_hat: lambda,
        phi_hat: phi.max(1.0),
        n_clusters: h,
    })
}
