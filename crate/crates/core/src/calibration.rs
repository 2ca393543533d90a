//! Bootstrap calibration of the interval coefficient `δ`.
//!
//! A set of parametric bootstrap replicates is drawn once per task. Each
//! replicate pairs a refit on a historical-shaped sample (giving the centers
//! and standard errors of every future slot) with a simulated future sample.
//! The coverage `Ψ̂_δ` is the fraction of replicates whose intervals cover all
//! future slots at once, and `δ` is found by bisection on that fraction.
//!
//! Replicate `b` draws from substream `b` of the task stream: its historical
//! sample from `b/0/k` (retry `k`) and its future sample from `b/1`. The
//! result therefore does not depend on the number of worker threads.

use std::fmt;
use std::io::{self, Write};

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Alternative, CalibrationSettings, ClusteredBinomial, ClusteredCounts};
use crate::design::{subset_rows, DesignMatrices, FutureDesign};
use crate::error::{Error, Result};
use crate::fitting::{
    fit_beta_binomial, fit_quasi_binomial, fit_quasi_poisson, BetaBinomialFit, LmmFit,
    QuasiBinomialFit, QuasiPoissonFit, RemlOptions, RemlProblem,
};
use crate::intervals::{
    beta_binomial_se, quasi_binomial_se, quasi_poisson_se, raw_bounds, Support,
};
use crate::rng::RandomStream;
use crate::sampling::{
    floor_phi, sample_beta_binomial, sample_lmm, sample_quasi_binomial, sample_quasi_poisson,
};

/// Smallest accepted number of bootstrap replicates.
pub const MIN_REPLICATES: usize = 100;
/// Resamples tried per replicate before a failing refit becomes an error.
pub const MAX_RETRIES: usize = 100;

/// A fitted historical model, the generator of the bootstrap.
#[derive(Debug, Clone)]
pub enum FittedModel {
    QuasiBinomial(QuasiBinomialFit),
    BetaBinomial(BetaBinomialFit),
    QuasiPoisson(QuasiPoissonFit),
    Lmm(LmmFit),
}

/// One future slot of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Slot {
    pub center: f64,
    pub se: f64,
    pub observed: f64,
    pub support: Support,
}

impl Slot {
    /// Closed-interval coverage of the observed value at `delta`.
    #[inline]
    pub fn covered(&self, delta: f64, alt: Alternative) -> bool {
        let (lower, upper) = raw_bounds(self.center, self.se, delta, alt);
        let lower = lower.max(self.support.lo);
        let upper = upper.min(self.support.hi);
        lower <= self.observed && self.observed <= upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapReplicate {
    pub slots: Vec<Slot>,
}

impl BootstrapReplicate {
    pub fn covered(&self, delta: f64, alt: Alternative) -> bool {
        self.slots.iter().all(|s| s.covered(delta, alt))
    }
}

enum LmmFuture {
    Rows(Vec<usize>),
    Unstructured(usize),
    Matrices(DesignMatrices),
}

enum Plan<'a> {
    QuasiBinomial(&'a QuasiBinomialFit, &'a [u64]),
    BetaBinomial(&'a BetaBinomialFit, &'a [u64]),
    QuasiPoisson(&'a QuasiPoissonFit, usize),
    Lmm(&'a LmmFit, RemlProblem, LmmFuture),
}

fn plan<'a>(model: &'a FittedModel, future: &'a FutureDesign) -> Result<Plan<'a>> {
    let mismatch = |what: &str| {
        Err(Error::TaskMismatch(format!(
            "{what} cannot be combined with this future design"
        )))
    };
    match (model, future) {
        (FittedModel::QuasiBinomial(fit), FutureDesign::ClusterSizes(sizes)) => {
            Ok(Plan::QuasiBinomial(fit, sizes))
        }
        (FittedModel::BetaBinomial(fit), FutureDesign::ClusterSizes(sizes)) => {
            Ok(Plan::BetaBinomial(fit, sizes))
        }
        (FittedModel::QuasiPoisson(fit), FutureDesign::CountRepeats(m)) => {
            Ok(Plan::QuasiPoisson(fit, *m))
        }
        (FittedModel::Lmm(fit), f) => {
            let n = fit.design.n_rows();
            let lmm_future = match f {
                FutureDesign::Unstructured(m) if *m > n => {
                    return Err(Error::TaskMismatch(format!(
                        "cannot draw {m} distinct future rows from {n} historical rows"
                    )))
                }
                FutureDesign::Unstructured(m) => LmmFuture::Unstructured(*m),
                FutureDesign::RowSubset(rows) => {
                    subset_rows(&fit.design, rows)?;
                    LmmFuture::Rows(rows.iter().map(|r| r - 1).collect())
                }
                FutureDesign::ExplicitMatrices(dm) => LmmFuture::Matrices(dm.aligned_to(&fit.spec)?),
                _ => return mismatch("a mixed model"),
            };
            Ok(Plan::Lmm(fit, RemlProblem::new(fit.design.clone()), lmm_future))
        }
        (FittedModel::QuasiBinomial(_) | FittedModel::BetaBinomial(_), _) => {
            mismatch("a binomial model")
        }
        (FittedModel::QuasiPoisson(_), _) => mismatch("a Poisson model"),
    }
}

fn is_refit_failure(e: &Error) -> bool {
    matches!(e, Error::DegenerateData(_) | Error::NonConvergence { .. })
}

/// Draws historical samples until the refit succeeds.
fn refit_with_retries<T>(
    stream: &RandomStream,
    replicate: usize,
    mut draw: impl FnMut(&mut RandomStream) -> Result<T>,
) -> Result<T> {
    for k in 0..MAX_RETRIES {
        let mut rng = stream.derive(k as u64);
        match draw(&mut rng) {
            Err(e) if is_refit_failure(&e) => continue,
            other => return other,
        }
    }
    Err(Error::RetryBudgetExhausted {
        replicate,
        attempts: MAX_RETRIES,
    })
}

fn binomial_slots(
    sizes: &[u64],
    observed: Vec<u64>,
    center_se: impl Fn(u64) -> (f64, f64),
) -> Vec<Slot> {
    sizes
        .iter()
        .zip(observed)
        .map(|(&n, y)| {
            let (center, se) = center_se(n);
            Slot {
                center,
                se,
                observed: y as f64,
                support: Support::binomial(n),
            }
        })
        .collect()
}

fn replicate(plan: &Plan<'_>, root: &RandomStream, b: usize) -> Result<BootstrapReplicate> {
    let stream = root.derive(b as u64);
    let hist = stream.derive(0);
    let mut fut = stream.derive(1);
    let slots = match plan {
        Plan::QuasiBinomial(fit, sizes) => {
            let phi = floor_phi(fit.phi_hat);
            let refit = refit_with_retries(&hist, b, |rng| {
                let y = sample_quasi_binomial(&fit.sizes, fit.pi_hat, phi, rng)?;
                fit_quasi_binomial(&ClusteredBinomial::from_counts(&y, &fit.sizes)?)
            })?;
            let observed = sample_quasi_binomial(sizes, fit.pi_hat, phi, &mut fut)?;
            binomial_slots(sizes, observed, |n| {
                (n as f64 * refit.pi_hat, quasi_binomial_se(&refit, n))
            })
        }
        Plan::BetaBinomial(fit, sizes) => {
            let refit = refit_with_retries(&hist, b, |rng| {
                let y = sample_beta_binomial(&fit.sizes, fit.pi_hat, fit.rho_hat, rng)?;
                fit_beta_binomial(&ClusteredBinomial::from_counts(&y, &fit.sizes)?)
            })?;
            let observed = sample_beta_binomial(sizes, fit.pi_hat, fit.rho_hat, &mut fut)?;
            binomial_slots(sizes, observed, |n| {
                (n as f64 * refit.pi_hat, beta_binomial_se(&refit, n))
            })
        }
        Plan::QuasiPoisson(fit, m) => {
            let phi = floor_phi(fit.phi_hat);
            let refit = refit_with_retries(&hist, b, |rng| {
                let y = sample_quasi_poisson(fit.n_clusters, fit.lambda_hat, phi, rng)?;
                fit_quasi_poisson(&ClusteredCounts::new(y)?)
            })?;
            let se = quasi_poisson_se(&refit);
            sample_quasi_poisson(*m, fit.lambda_hat, phi, &mut fut)?
                .into_iter()
                .map(|y| Slot {
                    center: refit.lambda_hat,
                    se,
                    observed: y as f64,
                    support: Support::NONNEGATIVE,
                })
                .collect()
        }
        Plan::Lmm(fit, problem, future) => {
            let opts = RemlOptions::default();
            let refit = refit_with_retries(&hist, b, |rng| {
                let y = sample_lmm(fit.mu_hat, &fit.sigma2, &fit.design, rng)?;
                problem.fit(&y, &opts)
            })?;
            let observed = match future {
                LmmFuture::Matrices(dm) => sample_lmm(fit.mu_hat, &fit.sigma2, dm, &mut fut)?,
                LmmFuture::Rows(rows) => {
                    let y = sample_lmm(fit.mu_hat, &fit.sigma2, &fit.design, &mut fut)?;
                    rows.iter().map(|&r| y[r]).collect()
                }
                LmmFuture::Unstructured(m) => {
                    let y = sample_lmm(fit.mu_hat, &fit.sigma2, &fit.design, &mut fut)?;
                    index::sample(&mut fut, y.len(), *m)
                        .into_iter()
                        .map(|r| y[r])
                        .collect()
                }
            };
            let se = refit.pred_se();
            observed
                .into_iter()
                .map(|y| Slot {
                    center: refit.mu_hat,
                    se,
                    observed: y,
                    support: Support::REAL_LINE,
                })
                .collect()
        }
    };
    Ok(BootstrapReplicate { slots })
}

/// Draws `nboot` bootstrap replicates from `model` for the given future design.
///
/// Replicates are generated in parallel; the output is identical to a serial
/// run. The first failing replicate (in index order) determines the error.
pub fn make_replicates(
    model: &FittedModel,
    future: &FutureDesign,
    nboot: usize,
    stream: &RandomStream,
) -> Result<Vec<BootstrapReplicate>> {
    if nboot < MIN_REPLICATES {
        return Err(Error::InvalidSetting(format!(
            "nboot must be at least {MIN_REPLICATES}, got {nboot}"
        )));
    }
    if future.n_slots() == 0 {
        return Err(Error::TaskMismatch("no future observations requested".into()));
    }
    let plan = plan(model, future)?;
    let results: Vec<Result<BootstrapReplicate>> = (0..nboot)
        .into_par_iter()
        .map(|b| replicate(&plan, stream, b))
        .collect();
    results.into_iter().collect()
}

/// `Ψ̂_δ`: fraction of replicates whose intervals cover every slot.
pub fn coverage_at(replicates: &[BootstrapReplicate], delta: f64, alt: Alternative) -> f64 {
    if replicates.is_empty() {
        return 0.0;
    }
    let hits = replicates.iter().filter(|r| r.covered(delta, alt)).count();
    hits as f64 / replicates.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceStep {
    /// `-1` and `0` are the `δ_min` and `δ_max` evaluations, then `1..`.
    pub step: i64,
    pub delta: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationWarning {
    /// Coverage at `δ_min` already exceeds the target.
    AboveTargetAtMin { delta_min: f64, coverage: f64 },
    /// Coverage at `δ_max` is still below the target.
    BelowTargetAtMax { delta_max: f64, coverage: f64 },
    /// No bisection step came within the tolerance.
    NotConverged { steps: usize, coverage: f64 },
}

impl fmt::Display for CalibrationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationWarning::AboveTargetAtMin { delta_min, coverage } => write!(
                f,
                "coverage {coverage} at delta_min = {delta_min} already exceeds the nominal level; \
                 lower delta_min"
            ),
            CalibrationWarning::BelowTargetAtMax { delta_max, coverage } => write!(
                f,
                "coverage {coverage} at delta_max = {delta_max} is below the nominal level; \
                 raise delta_max"
            ),
            CalibrationWarning::NotConverged { steps, coverage } => write!(
                f,
                "bisection did not reach the tolerance band in {steps} steps \
                 (last coverage {coverage}); widen the tolerance or change the search interval"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub delta: f64,
    pub converged: bool,
    pub trace: Vec<TraceStep>,
    pub psi_at_delta: f64,
    pub warning: Option<CalibrationWarning>,
}

/// Bisection for `δ` with `|Ψ̂_δ - (1-α)| < t`.
///
/// Both bracket ends are evaluated first. If one already lies within the
/// tolerance it is returned; if the bracket does not straddle the target the
/// violating end is returned unconverged. Otherwise midpoints are evaluated
/// for at most `G_max` steps and, failing convergence, the last midpoint is
/// returned unconverged.
pub fn bisect_delta(
    replicates: &[BootstrapReplicate],
    settings: &CalibrationSettings,
) -> Result<CalibrationResult> {
    settings.validate()?;
    let target = settings.target();
    let tol = settings.tolerance;
    let alt = settings.alternative;
    let mut trace = Vec::with_capacity(settings.max_bisection_steps + 2);
    let eval = |step: i64, delta: f64, trace: &mut Vec<TraceStep>| {
        let coverage = coverage_at(replicates, delta, alt);
        trace.push(TraceStep { step, delta, coverage });
        coverage
    };
    let done = |delta, psi, converged, warning, trace| CalibrationResult {
        delta,
        converged,
        trace,
        psi_at_delta: psi,
        warning,
    };

    let psi_min = eval(-1, settings.delta_min, &mut trace);
    let psi_max = eval(0, settings.delta_max, &mut trace);
    if (psi_min - target).abs() < tol {
        return Ok(done(settings.delta_min, psi_min, true, None, trace));
    }
    if (psi_max - target).abs() < tol {
        return Ok(done(settings.delta_max, psi_max, true, None, trace));
    }
    if psi_min > target {
        let w = CalibrationWarning::AboveTargetAtMin {
            delta_min: settings.delta_min,
            coverage: psi_min,
        };
        return Ok(done(settings.delta_min, psi_min, false, Some(w), trace));
    }
    if psi_max < target {
        let w = CalibrationWarning::BelowTargetAtMax {
            delta_max: settings.delta_max,
            coverage: psi_max,
        };
        return Ok(done(settings.delta_max, psi_max, false, Some(w), trace));
    }

    let (mut lo, mut hi) = (settings.delta_min, settings.delta_max);
    let (mut mid, mut psi) = (lo, psi_min);
    for g in 1..=settings.max_bisection_steps {
        mid = 0.5 * (lo + hi);
        psi = eval(g as i64, mid, &mut trace);
        if (psi - target).abs() < tol {
            return Ok(done(mid, psi, true, None, trace));
        }
        if psi < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = CalibrationWarning::NotConverged {
        steps: settings.max_bisection_steps,
        coverage: psi,
    };
    Ok(done(mid, psi, false, Some(w), trace))
}

/// Writes the trace as CSV with header `step,delta,coverage`.
pub fn write_trace_csv<W: Write>(result: &CalibrationResult, out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "delta", "coverage"])?;
    for s in &result.trace {
        w.write_record([s.step.to_string(), s.delta.to_string(), s.coverage.to_string()])?;
    }
    w.flush()
}

/// A self-contained SVG chart of `Ψ̂_δ - (1-α)` against `δ` over the bisection.
pub fn trace_svg(result: &CalibrationResult, alpha: f64, tolerance: f64) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    let target = 1.0 - alpha;
    let pts: Vec<(f64, f64)> = result
        .trace
        .iter()
        .map(|s| (s.delta, s.coverage - target))
        .collect();
    let (mut x0, mut x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts
        .iter()
        .fold((-tolerance, tolerance), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !(x1 > x0) {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        W - 2.0 * M,
        H - 2.0 * M
    ));
    for (y, dash) in [(0.0, "none"), (tolerance, "4 3"), (-tolerance, "4 3")] {
        svg.push_str(&format!(
            "<line x1=\"{M}\" x2=\"{}\" y1=\"{y:.2}\" y2=\"{y:.2}\" stroke=\"grey\" \
             stroke-dasharray=\"{dash}\"/>\n",
            W - M,
            y = sy(y)
        ));
    }
    let line: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\"/>\n",
        line.join(" ")
    ));
    for (s, &(x, y)) in result.trace.iter().zip(&pts) {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"><title>step {}: delta {}, \
             coverage {}</title></circle>\n",
            sx(x),
            sy(y),
            s.step,
            s.delta,
            s.coverage
        ));
    }
    let text = |x: f64, y: f64, anchor: &str, s: String| {
        format!("<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\">{s}</text>\n")
    };
    svg.push_str(&text(M, H - M + 16.0, "middle", format!("{x0:.3}")));
    svg.push_str(&text(W - M, H - M + 16.0, "middle", format!("{x1:.3}")));
    svg.push_str(&text(M - 6.0, sy(y0) + 4.0, "end", format!("{y0:.3}")));
    svg.push_str(&text(M - 6.0, sy(y1) + 4.0, "end", format!("{y1:.3}")));
    svg.push_str(&text(W / 2.0, H - 12.0, "middle", "delta".into()));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">\
         coverage - {target}</text>\n",
        H / 2.0,
        H / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}
