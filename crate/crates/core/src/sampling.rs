//! Generators for overdispersed binomial, overdispersed Poisson and
//! random-intercept Gaussian data.
//!
//! Beta variates are built as `G1 / (G1 + G2)` from two unit-rate gammas so
//! that only gamma, normal, Poisson and binomial primitives are needed; those
//! are delegated to `rand_distr`.
//!
//! The gamma mixing distribution of the quasi-Poisson sampler is
//! parameterized by shape `a = 1/κ` and **rate** `b = 1/(κλ)`, so the cluster
//! means have `E = λ` and `Var = κλ²`, giving `Var(y) = λ + κλ² = φλ`.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson, StandardNormal};

use crate::design::DesignMatrices;
use crate::error::{Error, Result};

/// Smallest intraclass correlation a caller may opt into via [`floor_rho`].
pub const RHO_FLOOR: f64 = 1e-9;
/// Smallest excess dispersion `φ - 1` a caller may opt into via [`floor_phi`].
pub const PHI_FLOOR_EXCESS: f64 = 1e-9;

/// Raises `rho` to [`RHO_FLOOR`]. Samplers themselves never clamp.
pub fn floor_rho(rho: f64) -> f64 {
    rho.max(RHO_FLOOR)
}

/// Raises `phi` to `1 + PHI_FLOOR_EXCESS`. Samplers themselves never clamp.
pub fn floor_phi(phi: f64) -> f64 {
    phi.max(1.0 + PHI_FLOOR_EXCESS)
}

/// Beta mixing distribution of the cluster proportions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaMixing {
    pub a: f64,
    pub b: f64,
}

impl BetaMixing {
    /// Beta-binomial: `a + b = (1-ρ)/ρ`, `a = π(a+b)`.
    pub fn from_rho(prob: f64, rho: f64) -> Result<Self> {
        check_prob(prob)?;
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::out_of_range("rho", rho, "must lie in (0, 1)"));
        }
        let sum = (1.0 - rho) / rho;
        let a = prob * sum;
        Ok(Self { a, b: sum - a })
    }

    /// Quasi-binomial, per cluster: `(a+b)_i = (φ - n_i)/(1 - φ)`.
    pub fn quasi_binomial(prob: f64, phi: f64, size: u64) -> Result<Self> {
        check_prob(prob)?;
        if !(phi > 1.0) {
            return Err(Error::out_of_range("phi", phi, "must exceed 1"));
        }
        let n = size as f64;
        if !(phi < n) {
            return Err(Error::out_of_range(
                "phi",
                phi,
                "must be smaller than every cluster size (beta parameters must be positive)",
            ));
        }
        let sum = (phi - n) / (1.0 - phi);
        let a = prob * sum;
        Ok(Self { a, b: sum - a })
    }

    /// Intraclass correlation `1/(1+a+b)`.
    pub fn rho(&self) -> f64 {
        1.0 / (1.0 + self.a + self.b)
    }
}

/// Gamma mixing distribution of the Poisson means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaMixing {
    pub kappa: f64,
    pub shape: f64,
    pub rate: f64,
}

impl GammaMixing {
    /// `κ = (φ-1)/λ`, shape `1/κ`, rate `1/(κλ)`.
    pub fn quasi_poisson(lambda: f64, phi: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::out_of_range("lambda", lambda, "must be positive"));
        }
        if !(phi > 1.0 && phi.is_finite()) {
            return Err(Error::out_of_range("phi", phi, "must exceed 1"));
        }
        let kappa = (phi - 1.0) / lambda;
        Ok(Self {
            kappa,
            shape: 1.0 / kappa,
            rate: 1.0 / (kappa * lambda),
        })
    }
}

fn check_prob(prob: f64) -> Result<()> {
    if prob > 0.0 && prob < 1.0 {
        Ok(())
    } else {
        Err(Error::out_of_range("prob", prob, "must lie in (0, 1)"))
    }
}

fn check_sizes(sizes: &[u64]) -> Result<()> {
    match sizes.iter().position(|&n| n == 0) {
        Some(i) => Err(Error::InvalidData(format!("cluster {} has size 0", i + 1))),
        None => Ok(()),
    }
}

fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters validated by caller")
        .sample(rng)
}

fn beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let g1 = gamma(rng, a, 1.0);
    let g2 = gamma(rng, b, 1.0);
    let total = g1 + g2;
    if total > 0.0 {
        g1 / total
    } else {
        // both gammas underflowed: the beta mass sits at the endpoints
        if rng.random::<f64>() < a / (a + b) {
            1.0
        } else {
            0.0
        }
    }
}

fn binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    Binomial::new(n, p.clamp(0.0, 1.0))
        .expect("probability clamped to [0, 1]")
        .sample(rng)
}

fn poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

/// Beta-binomial counts: `π_i ~ Beta(a, b)`, `y_i ~ Bin(n_i, π_i)`.
pub fn sample_beta_binomial<R: Rng + ?Sized>(
    sizes: &[u64],
    prob: f64,
    rho: f64,
    rng: &mut R,
) -> Result<Vec<u64>> {
    check_sizes(sizes)?;
    let mix = BetaMixing::from_rho(prob, rho)?;
    Ok(sizes
        .iter()
        .map(|&n| {
            let p = beta(rng, mix.a, mix.b);
            binomial(rng, n, p)
        })
        .collect())
}

/// Quasi-binomial counts with `Var(y_i) = φ n_i π (1-π)`; requires `1 < φ < min n_i`.
pub fn sample_quasi_binomial<R: Rng + ?Sized>(
    sizes: &[u64],
    prob: f64,
    phi: f64,
    rng: &mut R,
) -> Result<Vec<u64>> {
    check_sizes(sizes)?;
    let params = sizes
        .iter()
        .map(|&n| BetaMixing::quasi_binomial(prob, phi, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(sizes
        .iter()
        .zip(params)
        .map(|(&n, mix)| {
            let p = beta(rng, mix.a, mix.b);
            binomial(rng, n, p)
        })
        .collect())
}

/// Quasi-Poisson counts from the gamma-Poisson mixture; `E = λ`, `Var = φλ`.
pub fn sample_quasi_poisson<R: Rng + ?Sized>(
    clusters: usize,
    lambda: f64,
    phi: f64,
    rng: &mut R,
) -> Result<Vec<u64>> {
    let mix = GammaMixing::quasi_poisson(lambda, phi)?;
    Ok((0..clusters)
        .map(|_| {
            let mean = gamma(rng, mix.shape, mix.rate);
            poisson(rng, mean)
        })
        .collect())
}

/// Plain Poisson counts; the `φ = 1` limit of [`sample_quasi_poisson`].
pub fn sample_poisson<R: Rng + ?Sized>(clusters: usize, lambda: f64, rng: &mut R) -> Result<Vec<u64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::out_of_range("lambda", lambda, "must be positive"));
    }
    Ok((0..clusters).map(|_| poisson(rng, lambda)).collect())
}

/// Plain binomial counts; the `φ = 1` limit of [`sample_quasi_binomial`].
pub fn sample_binomial<R: Rng + ?Sized>(sizes: &[u64], prob: f64, rng: &mut R) -> Result<Vec<u64>> {
    check_sizes(sizes)?;
    check_prob(prob)?;
    Ok(sizes.iter().map(|&n| binomial(rng, n, prob)).collect())
}

/// `y = 1μ + Σ_c Z_c U_c + e` with `U_c ~ N(0, σ²_c I)` and `e ~ N(0, σ²_{C+1} I)`.
///
/// Draw order: the random effects of every term in term order, then the residuals.
pub fn sample_lmm<R: Rng + ?Sized>(
    mu: f64,
    sigma2: &[f64],
    dm: &DesignMatrices,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if sigma2.len() != dm.terms().len() + 1 {
        return Err(Error::InvalidData(format!(
            "{} variance components given, design needs {}",
            sigma2.len(),
            dm.terms().len() + 1
        )));
    }
    if let Some(&bad) = sigma2.iter().find(|&&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::out_of_range(
            "sigma2",
            bad,
            "variance components must be nonnegative",
        ));
    }
    let mut y = vec![mu; dm.n_rows()];
    for (term, &s2) in dm.terms().iter().zip(sigma2) {
        let sd = s2.sqrt();
        let effects: Vec<f64> = (0..term.n_columns())
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (yi, &level) in y.iter_mut().zip(term.row_levels()) {
            *yi += effects[level];
        }
    }
    let sd = sigma2[dm.terms().len()].sqrt();
    for yi in &mut y {
        *yi += sd * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(y)
}
