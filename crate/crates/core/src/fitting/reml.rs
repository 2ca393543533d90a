//! Restricted maximum likelihood for intercept-only random-intercept models.
//!
//! With `V = σ² (I + Z Λ Zᵀ)` and `Λ = diag(θ_c)` expanded over the columns
//! of every term, the residual variance is profiled out and the remaining
//! relative variances are optimized as `θ_c = s_c²` with unconstrained `s_c`,
//! so components on the boundary (`σ²_c = 0`) are reachable.
//!
//! All quantities come from the `F x F` matrix `A = S ZᵀZ S + I`
//! (`S = Λ^{1/2}`):
//!
//! * `log |V| = N log σ² + log |A|`
//! * `uᵀ V⁻¹ w = (uᵀw - (S Zᵀu)ᵀ A⁻¹ (S Zᵀw)) / σ²`
//!
//! The residual variance is bounded below by `residual_floor * var(y)`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::MixedModelData;
use crate::design::{build_design_matrices, DesignMatrices, ModelSpec};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy)]
pub struct RemlOptions {
    pub optimizer: NelderMeadOptions,
    /// Residual variance floor relative to the sample variance of `y`.
    pub residual_floor: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            optimizer: NelderMeadOptions::default(),
            residual_floor: 1e-10,
        }
    }
}

/// Fitted random-intercept model.
#[derive(Debug, Clone, Serialize)]
pub struct LmmFit {
    pub mu_hat: f64,
    pub var_mu_hat: f64,
    /// `σ̂²_1 .. σ̂²_C`, residual last.
    pub sigma2: Vec<f64>,
    /// Maximized restricted log-likelihood.
    pub reml_value: f64,
    pub evaluations: usize,
    #[serde(skip)]
    pub spec: ModelSpec,
    #[serde(skip)]
    pub design: DesignMatrices,
}

impl LmmFit {
    /// `√(var̂(μ̂) + Σ σ̂²_c)`.
    pub fn pred_se(&self) -> f64 {
        (self.var_mu_hat + self.sigma2.iter().sum::<f64>()).sqrt()
    }
}

/// Estimates from one REML optimization, without the model bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RemlEstimate {
    pub mu_hat: f64,
    pub var_mu_hat: f64,
    pub sigma2: Vec<f64>,
    pub reml_value: f64,
    pub evaluations: usize,
}

impl RemlEstimate {
    pub fn pred_se(&self) -> f64 {
        (self.var_mu_hat + self.sigma2.iter().sum::<f64>()).sqrt()
    }
}

struct ResponseStats<'a> {
    y: &'a [f64],
    zt_y: DVector<f64>,
    sum: f64,
    floor: f64,
}

struct Evaluation {
    deviance: f64,
    sigma2_res: f64,
    mu: f64,
    precision_mu: f64,
}

/// Design-dependent parts of the REML objective, reusable across responses.
#[derive(Debug, Clone)]
pub struct RemlProblem {
    design: DesignMatrices,
    column_term: Vec<usize>,
    /// Global column of every row, row-major by term.
    row_columns: Vec<usize>,
    zt_z: DMatrix<f64>,
    zt_one: DVector<f64>,
}

impl RemlProblem {
    pub fn new(design: DesignMatrices) -> Self {
        let f = design.total_columns();
        let mut column_term = Vec::with_capacity(f);
        let mut offsets = Vec::with_capacity(design.terms().len());
        for (c, t) in design.terms().iter().enumerate() {
            offsets.push(column_term.len());
            column_term.extend(std::iter::repeat_n(c, t.n_columns()));
        }
        let mut zt_z = DMatrix::zeros(f, f);
        let mut zt_one = DVector::zeros(f);
        let mut row_columns = Vec::with_capacity(design.n_rows() * offsets.len());
        for row in 0..design.n_rows() {
            let cols: Vec<usize> = design
                .terms()
                .iter()
                .zip(&offsets)
                .map(|(t, off)| off + t.row_levels()[row])
                .collect();
            row_columns.extend_from_slice(&cols);
            for &i in &cols {
                zt_one[i] += 1.0;
                for &j in &cols {
                    zt_z[(i, j)] += 1.0;
                }
            }
        }
        Self {
            design,
            column_term,
            row_columns,
            zt_z,
            zt_one,
        }
    }

    pub fn design(&self) -> &DesignMatrices {
        &self.design
    }

    fn n_terms(&self) -> usize {
        self.design.terms().len()
    }

    fn stats<'a>(&self, y: &'a [f64], residual_floor: f64) -> Result<ResponseStats<'a>> {
        let n = self.design.n_rows();
        if y.len() != n {
            return Err(Error::InvalidData(format!(
                "response has {} values, design has {n} rows",
                y.len()
            )));
        }
        if n <= self.n_terms() + 1 {
            return Err(Error::InvalidData(format!(
                "{n} observations cannot identify {} variance components",
                self.n_terms() + 1
            )));
        }
        let mut zt_y = DVector::zeros(self.zt_one.len());
        let mut offset = 0;
        for t in self.design.terms() {
            for (yi, &l) in y.iter().zip(t.row_levels()) {
                zt_y[offset + l] += yi;
            }
            offset += t.n_columns();
        }
        let sum: f64 = y.iter().sum();
        let mean = sum / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if !(var > 0.0) {
            return Err(Error::DegenerateData("response is constant"));
        }
        Ok(ResponseStats {
            y,
            zt_y,
            sum,
            floor: residual_floor * var,
        })
    }

    fn evaluate(&self, s: &[f64], st: &ResponseStats<'_>) -> Option<Evaluation> {
        let n = self.design.n_rows() as f64;
        let f = self.zt_one.len();
        let scale: Vec<f64> = self.column_term.iter().map(|&c| s[c].abs()).collect();
        let mut a = DMatrix::<f64>::zeros(f, f);
        for j in 0..f {
            for i in 0..f {
                a[(i, j)] = scale[i] * scale[j] * self.zt_z[(i, j)];
            }
            a[(j, j)] += 1.0;
        }
        let chol = a.cholesky()?;
        let l = chol.l_dirty();
        let log_det_a = 2.0 * (0..f).map(|i| l[(i, i)].ln()).sum::<f64>();
        let solve = |v: DVector<f64>| {
            let mut v = v;
            l.solve_lower_triangular_mut(&mut v).then_some(v)
        };
        let u1 = solve(DVector::from_iterator(f, (0..f).map(|i| scale[i] * self.zt_one[i])))?;
        let uy = solve(DVector::from_iterator(f, (0..f).map(|i| scale[i] * st.zt_y[i])))?;

        // 1ᵀV₀⁻¹1 and 1ᵀV₀⁻¹y. Every term spans the intercept, so for the
        // term with the largest scale V₀⁻¹1 = Z S A⁻¹ S⁻¹ g (g = its column
        // indicator), which avoids cancelling against N when that scale is large.
        let (big, s_big) = s
            .iter()
            .map(|v| v.abs())
            .enumerate()
            .fold((0, 0.0), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc });
        let (a11, a1y) = if s_big > 1.0 {
            let w = solve(DVector::from_iterator(
                f,
                self.column_term
                    .iter()
                    .map(|&c| if c == big { 1.0 / s_big } else { 0.0 }),
            ))?;
            (w.dot(&u1), w.dot(&uy))
        } else {
            (n - u1.dot(&u1), st.sum - u1.dot(&uy))
        };
        if !(a11 > 0.0) {
            return None;
        }
        let mu = a1y / a11;
        // q = rᵀV₀⁻¹r as the penalized least-squares minimum
        // ‖r - Z S b‖² + ‖b‖² with b = A⁻¹ S Zᵀ r, free of cancellation.
        let mut b = &uy - &u1 * mu;
        if !l.tr_solve_lower_triangular_mut(&mut b) {
            return None;
        }
        let c = s.len();
        let fitted_sq: f64 = st
            .y
            .iter()
            .zip(self.row_columns.chunks_exact(c))
            .map(|(v, cols)| {
                let fit: f64 = cols.iter().map(|&j| scale[j] * b[j]).sum();
                (v - mu - fit).powi(2)
            })
            .sum();
        let q = fitted_sq + b.dot(&b);
        let sigma2 = (q / (n - 1.0)).max(st.floor);
        let deviance =
            (n - 1.0) * (sigma2.ln() + LN_2PI) + log_det_a + a11.ln() + q / sigma2;
        Some(Evaluation {
            deviance,
            sigma2_res: sigma2,
            mu,
            precision_mu: a11,
        })
    }

    fn estimate_at(&self, s: &[f64], st: &ResponseStats<'_>, evaluations: usize) -> Option<RemlEstimate> {
        let e = self.evaluate(s, st)?;
        let mut sigma2: Vec<f64> = s.iter().map(|v| v * v * e.sigma2_res).collect();
        sigma2.push(e.sigma2_res);
        Some(RemlEstimate {
            mu_hat: e.mu,
            var_mu_hat: e.sigma2_res / e.precision_mu,
            sigma2,
            reml_value: -0.5 * e.deviance,
            evaluations,
        })
    }

    /// Crude moment estimates used as the first optimizer start: pooled
    /// within-cell variance for the residual and, per term, the excess of
    /// the between-level mean square over it.
    pub fn moment_start(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let mut cells: HashMap<Vec<usize>, (f64, f64, usize)> = HashMap::new();
        for (row, &v) in y.iter().enumerate() {
            let key: Vec<usize> = self.design.terms().iter().map(|t| t.row_levels()[row]).collect();
            let e = cells.entry(key).or_insert((0.0, 0.0, 0));
            e.0 += v;
            e.1 += v * v;
            e.2 += 1;
        }
        let within_df = n - cells.len();
        let total_var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let mut residual = if within_df > 0 {
            cells
                .values()
                .map(|(s, ss, k)| ss - s * s / *k as f64)
                .sum::<f64>()
                / within_df as f64
        } else {
            total_var / (self.n_terms() + 1) as f64
        };
        residual = residual.max(1e-3 * total_var);
        let mut sigma2: Vec<f64> = self
            .design
            .terms()
            .iter()
            .map(|t| {
                let k = t.n_columns();
                let mut sums = vec![(0.0, 0usize); k];
                for (v, &l) in y.iter().zip(t.row_levels()) {
                    sums[l].0 += v;
                    sums[l].1 += 1;
                }
                let occupied: Vec<(f64, usize)> =
                    sums.into_iter().filter(|s| s.1 > 0).collect();
                if occupied.len() < 2 {
                    return 0.0;
                }
                let msb = occupied
                    .iter()
                    .map(|(s, c)| *c as f64 * (s / *c as f64 - mean).powi(2))
                    .sum::<f64>()
                    / (occupied.len() - 1) as f64;
                let per_level = n as f64 / occupied.len() as f64;
                ((msb - residual) / per_level).max(0.0)
            })
            .collect();
        sigma2.push(residual);
        sigma2
    }

    /// Maximizes the restricted likelihood of `y` over the variance components.
    pub fn fit(&self, y: &[f64], opts: &RemlOptions) -> Result<RemlEstimate> {
        let st = self.stats(y, opts.residual_floor)?;
        let c = self.n_terms();
        let moments = self.moment_start(y);
        let residual = moments[c];
        let starts: [Vec<f64>; 3] = [
            moments[..c].iter().map(|v| (v / residual).sqrt()).collect(),
            vec![1.0; c],
            vec![0.0; c],
        ];
        let objective = |s: &[f64]| self.evaluate(s, &st).map_or(f64::INFINITY, |e| e.deviance);

        let mut evaluations = 0;
        let mut best: Option<(Vec<f64>, f64, bool)> = None;
        for start in &starts {
            let r = nelder_mead(objective, start, &opts.optimizer);
            evaluations += r.evaluations;
            if best.as_ref().is_none_or(|b| r.fx < b.1) {
                best = Some((r.x, r.fx, r.converged));
            }
        }
        let (mut x, mut fx, mut converged) = best.expect("at least one start");
        if !converged {
            let r = nelder_mead(objective, &x, &opts.optimizer);
            evaluations += r.evaluations;
            if r.fx <= fx {
                x = r.x;
                fx = r.fx;
            }
            converged = r.converged;
        }
        let est = self
            .estimate_at(&x, &st, evaluations)
            .ok_or(Error::DegenerateData("REML objective undefined at optimum"))?;
        if !converged {
            return Err(Error::NonConvergence {
                evaluations,
                best_deviance: fx,
                best_sigma2: est.sigma2,
            });
        }
        Ok(est)
    }

    /// Restricted log-likelihood at explicit components (residual last),
    /// computed from the dense `N x N` covariance.
    pub fn restricted_loglik(&self, y: &[f64], sigma2: &[f64]) -> Option<f64> {
        let n = y.len();
        let v = self.design.covariance(sigma2);
        let chol = v.cholesky()?;
        let one = DVector::from_element(n, 1.0);
        let yv = DVector::from_column_slice(y);
        let vinv_one = chol.solve(&one);
        let vinv_y = chol.solve(&yv);
        let a = one.dot(&vinv_one);
        let mu = one.dot(&vinv_y) / a;
        let r = &yv - &one * mu;
        let vinv_r = chol.solve(&r);
        let log_det_v = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Some(-0.5 * (log_det_v + a.ln() + r.dot(&vinv_r) + (n - 1) as f64 * LN_2PI))
    }
}

/// Fits `spec` to `data` by REML with default options.
pub fn fit_random_intercepts(data: &MixedModelData, spec: &ModelSpec) -> Result<LmmFit> {
    fit_random_intercepts_with(data, spec, &RemlOptions::default())
}

pub fn fit_random_intercepts_with(
    data: &MixedModelData,
    spec: &ModelSpec,
    opts: &RemlOptions,
) -> Result<LmmFit> {
    let design = build_design_matrices(data, spec)?;
    let problem = RemlProblem::new(design);
    let est = problem.fit(data.response(), opts)?;
    Ok(LmmFit {
        mu_hat: est.mu_hat,
        var_mu_hat: est.var_mu_hat,
        sigma2: est.sigma2,
        reml_value: est.reml_value,
        evaluations: est.evaluations,
        spec: spec.clone(),
        design: problem.design,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FactorColumn;
    use crate::design::parse_formula;

    fn one_way(y: Vec<f64>, labels: &[&str]) -> MixedModelData {
        MixedModelData::new(
            "y",
            y,
            vec![FactorColumn {
                name: "a".into(),
                labels: labels.iter().map(|s| s.to_string()).collect(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn profiled_objective_matches_dense_likelihood() {
        let data = one_way(
            vec![1.0, 2.5, 2.0, 5.0, 6.5, 5.5, 9.0, 8.0],
            &["p", "p", "p", "q", "q", "q", "r", "r"],
        );
        let fit = fit_random_intercepts(&data, &parse_formula("y~(1|a)").unwrap()).unwrap();
        let problem = RemlProblem::new(fit.design.clone());
        let dense = problem.restricted_loglik(data.response(), &fit.sigma2).unwrap();
        assert!((dense - fit.reml_value).abs() < 1e-9, "{dense} vs {}", fit.reml_value);
    }

    #[test]
    fn variance_entirely_between_levels() {
        let data = one_way(vec![3.0, 3.0, 3.0, 7.0, 7.0, 7.0], &["u", "u", "u", "v", "v", "v"]);
        let fit = fit_random_intercepts(&data, &parse_formula("y~(1|a)").unwrap()).unwrap();
        let var_y = 4.8; // sample variance of the six responses
        assert!(fit.sigma2[1] <= 1e-10 * var_y * (1.0 + 1e-9));
        // sample variance of the two level means
        assert!((fit.sigma2[0] - 8.0).abs() / 8.0 < 1e-3, "{:?}", fit.sigma2);
        assert!((fit.mu_hat - 5.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_observations() {
        let data = one_way(vec![1.0, 2.0], &["u", "v"]);
        assert!(fit_random_intercepts(&data, &parse_formula("y~(1|a)").unwrap()).is_err());
    }

    #[test]
    fn constant_response_is_degenerate() {
        let data = one_way(vec![2.0; 4], &["u", "u", "v", "v"]);
        assert!(matches!(
            fit_random_intercepts(&data, &parse_formula("y~(1|a)").unwrap()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn budget_exhaustion_carries_best_iterate() {
        let data = one_way(
            vec![1.0, 2.5, 2.0, 5.0, 6.5, 5.5, 9.0, 8.0],
            &["p", "p", "p", "q", "q", "q", "r", "r"],
        );
        let opts = RemlOptions {
            optimizer: NelderMeadOptions {
                max_evaluations: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        match fit_random_intercepts_with(&data, &parse_formula("y~(1|a)").unwrap(), &opts) {
            Err(Error::NonConvergence { best_sigma2, .. }) => assert_eq!(best_sigma2.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
