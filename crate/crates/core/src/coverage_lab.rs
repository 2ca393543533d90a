//! Monte Carlo coverage of complete tasks under a known truth.
//!
//! Every simulation draws fresh historical and future data from the truth,
//! builds the intervals of the task and records whether all future
//! observations are covered at once. Simulation `s` uses substream `s` of
//! the scenario seed (`s/0` historical data, `s/1` future data, `s/2` the
//! task's own bootstrap), so results do not depend on the thread count.

use std::io::{self, Write};

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibration::FittedModel;
use crate::data::{Alternative, CalibrationSettings, ClusteredBinomial, ClusteredCounts, MixedModelData};
use crate::design::{build_design_matrices, subset_rows, DesignMatrices, FutureDesign, ModelSpec};
use crate::error::{Error, Result};
use crate::intervals::{interval, IntervalRow, Support};
use crate::pipeline::{fit_task, intervals_for, run_task, HistoricalData, TaskKind, TaskSpec};
use crate::rng::RandomStream;
use crate::sampling::{sample_beta_binomial, sample_lmm, sample_quasi_binomial, sample_quasi_poisson};

/// Bootstrap size used inside simulations unless overridden.
pub const DEFAULT_LAB_NBOOT: usize = 2000;
/// Smallest accepted number of simulations.
pub const MIN_SIMULATIONS: usize = 100;

/// Data-generating truth with its historical layout.
#[derive(Debug, Clone)]
pub enum Truth {
    QuasiBinomial { prob: f64, phi: f64, sizes: Vec<u64> },
    BetaBinomial { prob: f64, rho: f64, sizes: Vec<u64> },
    QuasiPoisson { lambda: f64, phi: f64, clusters: usize },
    /// `layout` supplies the factor columns; its responses are ignored.
    Lmm {
        mu: f64,
        sigma2: Vec<f64>,
        layout: MixedModelData,
        spec: ModelSpec,
    },
}

/// How the intervals of each simulation are built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "mode", content = "delta", rename_all = "snake_case")]
pub enum LabMode {
    /// Full bootstrap calibration.
    Calibrated,
    /// Fixed coefficient, calibration bypassed.
    FixedDelta(f64),
    /// Normal quantile with the standard error of the model without
    /// overdispersion or random effects.
    NaiveBaseline,
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub truth: Truth,
    pub kind: TaskKind,
    pub future: FutureDesign,
    pub n_sim: usize,
    /// Per-simulation settings; `seed` is the scenario seed.
    pub settings: CalibrationSettings,
    pub mode: LabMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRecord {
    pub index: usize,
    pub covered: Option<bool>,
    pub delta: Option<f64>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub n_sim: usize,
    /// Fraction covered among simulations that ran without error.
    pub coverage: f64,
    /// `√(p̂(1-p̂)/n)` over the successful simulations.
    pub mc_se: f64,
    pub failures: usize,
    pub log: Vec<SimRecord>,
}

fn check_scenario(spec: &ScenarioSpec) -> Result<()> {
    if spec.n_sim < MIN_SIMULATIONS {
        return Err(Error::InvalidSetting(format!(
            "n_sim must be at least {MIN_SIMULATIONS}, got {}",
            spec.n_sim
        )));
    }
    spec.settings.validate()?;
    let ok = matches!(
        (&spec.truth, spec.kind),
        (Truth::QuasiBinomial { .. }, TaskKind::QuasiBin)
            | (Truth::BetaBinomial { .. }, TaskKind::BetaBin)
            | (Truth::QuasiPoisson { .. }, TaskKind::QuasiPois)
            | (Truth::Lmm { .. }, TaskKind::LmmUnstruc | TaskKind::LmmFutvec | TaskKind::LmmFutmat)
    );
    if !ok {
        return Err(Error::TaskMismatch(format!(
            "generator family does not match task {}",
            spec.kind
        )));
    }
    if let Truth::Lmm { sigma2, spec: model, .. } = &spec.truth {
        if sigma2.len() != model.n_terms() + 1 {
            return Err(Error::InvalidSetting(format!(
                "{} variance components given, model needs {}",
                sigma2.len(),
                model.n_terms() + 1
            )));
        }
    }
    Ok(())
}

fn future_sizes(future: &FutureDesign) -> Result<&[u64]> {
    match future {
        FutureDesign::ClusterSizes(s) => Ok(s),
        _ => Err(Error::TaskMismatch("binomial scenarios need future cluster sizes".into())),
    }
}

/// Historical data and future observations of one simulation.
fn draw(
    spec: &ScenarioSpec,
    hist_design: Option<&DesignMatrices>,
    stream: &RandomStream,
) -> Result<(HistoricalData, Vec<f64>)> {
    let mut h = stream.derive(0);
    let mut f = stream.derive(1);
    let as_f64 = |v: Vec<u64>| v.into_iter().map(|y| y as f64).collect::<Vec<_>>();
    match &spec.truth {
        Truth::QuasiBinomial { prob, phi, sizes } => {
            let y = sample_quasi_binomial(sizes, *prob, *phi, &mut h)?;
            let future = sample_quasi_binomial(future_sizes(&spec.future)?, *prob, *phi, &mut f)?;
            Ok((
                HistoricalData::Binomial(ClusteredBinomial::from_counts(&y, sizes)?),
                as_f64(future),
            ))
        }
        Truth::BetaBinomial { prob, rho, sizes } => {
            let y = sample_beta_binomial(sizes, *prob, *rho, &mut h)?;
            let future = sample_beta_binomial(future_sizes(&spec.future)?, *prob, *rho, &mut f)?;
            Ok((
                HistoricalData::Binomial(ClusteredBinomial::from_counts(&y, sizes)?),
                as_f64(future),
            ))
        }
        Truth::QuasiPoisson { lambda, phi, clusters } => {
            let y = sample_quasi_poisson(*clusters, *lambda, *phi, &mut h)?;
            let m = match spec.future {
                FutureDesign::CountRepeats(m) => m,
                _ => return Err(Error::TaskMismatch("Poisson scenarios need a count of future observations".into())),
            };
            let future = sample_quasi_poisson(m, *lambda, *phi, &mut f)?;
            Ok((HistoricalData::Counts(ClusteredCounts::new(y)?), as_f64(future)))
        }
        Truth::Lmm { mu, sigma2, layout, .. } => {
            let dm = hist_design.expect("design built for mixed-model truths");
            let y = sample_lmm(*mu, sigma2, dm, &mut h)?;
            let future = match &spec.future {
                FutureDesign::ExplicitMatrices(fm) => sample_lmm(*mu, sigma2, fm, &mut f)?,
                FutureDesign::RowSubset(rows) => {
                    let full = sample_lmm(*mu, sigma2, dm, &mut f)?;
                    rows.iter().map(|&r| full[r - 1]).collect()
                }
                FutureDesign::Unstructured(m) => {
                    let full = sample_lmm(*mu, sigma2, dm, &mut f)?;
                    if *m > full.len() {
                        return Err(Error::TaskMismatch("more future rows than historical rows".into()));
                    }
                    index::sample(&mut f, full.len(), *m).into_iter().map(|r| full[r]).collect()
                }
                _ => return Err(Error::TaskMismatch("unsupported future design for a mixed model".into())),
            };
            Ok((HistoricalData::Mixed(layout.with_response(y)?), future))
        }
    }
}

fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Intervals from the naive model: no overdispersion, no random effects.
fn naive_intervals(task: &TaskSpec, hist: &HistoricalData) -> Result<Vec<IntervalRow>> {
    let alpha = task.settings.alpha;
    let alt = task.settings.alternative;
    let z = match alt {
        Alternative::Both => normal_quantile(1.0 - alpha / 2.0),
        _ => normal_quantile(1.0 - alpha),
    };
    let future = task.future.as_ref().expect("lab tasks carry a future design");
    let rows = match (fit_task(task)?, hist) {
        (FittedModel::QuasiBinomial(f), _) => binomial_naive(f.pi_hat, f.total, future, z, alt)?,
        (FittedModel::BetaBinomial(f), _) => binomial_naive(f.pi_hat, f.total, future, z, alt)?,
        (FittedModel::QuasiPoisson(f), _) => {
            let se = (f.lambda_hat * (1.0 + 1.0 / f.n_clusters as f64)).sqrt();
            (0..future.n_slots())
                .map(|m| interval(m, f.lambda_hat, se, z, alt, Support::NONNEGATIVE))
                .collect()
        }
        (FittedModel::Lmm(_), HistoricalData::Mixed(d)) => {
            let y = d.response();
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var * (1.0 + 1.0 / n)).sqrt();
            (0..future.n_slots())
                .map(|m| interval(m, mean, se, z, alt, Support::REAL_LINE))
                .collect()
        }
        _ => unreachable!("history matches the fitted model"),
    };
    Ok(rows)
}

fn binomial_naive(
    pi: f64,
    total: u64,
    future: &FutureDesign,
    z: f64,
    alt: Alternative,
) -> Result<Vec<IntervalRow>> {
    let sizes = future_sizes(future)?;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let nf = n as f64;
            let se = (nf * pi * (1.0 - pi) * (1.0 + nf / total as f64)).sqrt();
            interval(m, nf * pi, se, z, alt, Support::binomial(n))
        })
        .collect())
}

fn one_simulation(
    spec: &ScenarioSpec,
    hist_design: Option<&DesignMatrices>,
    root: &RandomStream,
    s: usize,
) -> SimRecord {
    let stream = root.derive(s as u64);
    let outcome = (|| -> Result<(bool, Option<f64>, Option<bool>)> {
        let (history, observed) = draw(spec, hist_design, &stream)?;
        let model = match &spec.truth {
            Truth::Lmm { spec, .. } => Some(spec.clone()),
            _ => None,
        };
        let task = TaskSpec {
            kind: spec.kind,
            history: history.clone(),
            model,
            future: Some(spec.future.clone()),
            newdat: None,
            settings: CalibrationSettings {
                seed: stream.derive(2).key(),
                ..spec.settings.clone()
            },
        };
        let (bounds, delta, converged): (Vec<(f64, f64)>, _, _) = match spec.mode {
            LabMode::Calibrated => {
                let t = run_task(&task)?;
                let b = t.rows.iter().map(|r| (r.lower, r.upper)).collect();
                (b, Some(t.calibration.delta), Some(t.calibration.converged))
            }
            LabMode::FixedDelta(d) => {
                let (_, rows) = intervals_for(&task, d)?;
                (rows.iter().map(|r| (r.lower, r.upper)).collect(), Some(d), None)
            }
            LabMode::NaiveBaseline => {
                let rows = naive_intervals(&task, &history)?;
                (rows.iter().map(|r| (r.lower, r.upper)).collect(), None, None)
            }
        };
        // Summary tables carry one row shared by every slot.
        let covered = observed.iter().enumerate().all(|(m, &y)| {
            let (lo, hi) = bounds[m.min(bounds.len() - 1)];
            lo <= y && y <= hi
        });
        Ok((covered, delta, converged))
    })();
    match outcome {
        Ok((covered, delta, converged)) => SimRecord {
            index: s,
            covered: Some(covered),
            delta,
            converged,
            error: None,
        },
        Err(e) => SimRecord {
            index: s,
            covered: None,
            delta: None,
            converged: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs all simulations of a scenario.
pub fn simulate_coverage(spec: &ScenarioSpec) -> Result<CoverageReport> {
    check_scenario(spec)?;
    let hist_design = match &spec.truth {
        Truth::Lmm { layout, spec: model, .. } => {
            let dm = build_design_matrices(layout, model)?;
            if let FutureDesign::RowSubset(rows) = &spec.future {
                subset_rows(&dm, rows)?;
            }
            Some(dm)
        }
        _ => None,
    };
    let root = RandomStream::new(spec.settings.seed);
    let log: Vec<SimRecord> = (0..spec.n_sim)
        .into_par_iter()
        .map(|s| one_simulation(spec, hist_design.as_ref(), &root, s))
        .collect();
    let ok: Vec<bool> = log.iter().filter_map(|r| r.covered).collect();
    let failures = log.len() - ok.len();
    let (coverage, mc_se) = if ok.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let n = ok.len() as f64;
        let p = ok.iter().filter(|&&c| c).count() as f64 / n;
        (p, (p * (1.0 - p) / n).sqrt())
    };
    Ok(CoverageReport {
        scenario: spec.name.clone(),
        n_sim: spec.n_sim,
        coverage,
        mc_se,
        failures,
        log,
    })
}

/// Summary CSV `scenario,n_sim,coverage,mc_se,failures`, one row per report.
pub fn write_summary_csv<W: Write>(reports: &[CoverageReport], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "n_sim", "coverage", "mc_se", "failures"])?;
    for r in reports {
        w.write_record([
            r.scenario.clone(),
            r.n_sim.to_string(),
            r.coverage.to_string(),
            r.mc_se.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()
}

/// Per-simulation CSV `sim,covered,delta,converged,error`.
pub fn write_log_csv<W: Write>(report: &CoverageReport, out: W) -> io::Result<()> {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sim", "covered", "delta", "converged", "error"])?;
    for r in &report.log {
        w.write_record([
            r.index.to_string(),
            opt(r.covered.map(|c| c.to_string())),
            opt(r.delta.map(|d| d.to_string())),
            opt(r.converged.map(|c| c.to_string())),
            opt(r.error.clone()),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp_scenario(mode: LabMode, phi: f64) -> ScenarioSpec {
        ScenarioSpec {
            name: "qp".into(),
            truth: Truth::QuasiPoisson {
                lambda: 50.0,
                phi,
                clusters: 10,
            },
            kind: TaskKind::QuasiPois,
            future: FutureDesign::CountRepeats(1),
            n_sim: 100,
            settings: CalibrationSettings {
                nboot: 200,
                ..Default::default()
            },
            mode,
        }
    }

    #[test]
    fn zero_delta_on_continuous_data_never_covers() {
        let layout = MixedModelData::new(
            "y",
            vec![0.0; 12],
            vec![crate::data::FactorColumn {
                name: "a".into(),
                labels: (0..12).map(|i| (i % 4).to_string()).collect(),
            }],
        )
        .unwrap();
        let spec = ScenarioSpec {
            name: "lmm0".into(),
            truth: Truth::Lmm {
                mu: 10.0,
                sigma2: vec![1.0, 1.0],
                layout,
                spec: crate::design::parse_formula("y~(1|a)").unwrap(),
            },
            kind: TaskKind::LmmUnstruc,
            future: FutureDesign::Unstructured(1),
            n_sim: 100,
            settings: CalibrationSettings::default(),
            mode: LabMode::FixedDelta(0.0),
        };
        let r = simulate_coverage(&spec).unwrap();
        assert_eq!(r.failures, 0);
        assert_eq!(r.coverage, 0.0);
    }

    #[test]
    fn mismatched_family_rejected() {
        let mut s = qp_scenario(LabMode::Calibrated, 3.0);
        s.kind = TaskKind::QuasiBin;
        assert!(matches!(simulate_coverage(&s), Err(Error::TaskMismatch(_))));
        let mut s = qp_scenario(LabMode::Calibrated, 3.0);
        s.n_sim = 99;
        assert!(simulate_coverage(&s).is_err());
    }

    #[test]
    fn deterministic_and_csv() {
        let a = simulate_coverage(&qp_scenario(LabMode::NaiveBaseline, 5.0)).unwrap();
        let b = simulate_coverage(&qp_scenario(LabMode::NaiveBaseline, 5.0)).unwrap();
        assert_eq!(a, b);
        assert!(a.coverage < 0.9);
        let mut buf = Vec::new();
        write_summary_csv(std::slice::from_ref(&a), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario,n_sim,coverage,mc_se,failures\nqp,100,"));
        let mut buf = Vec::new();
        write_log_csv(&a, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 101);
    }

    #[test]
    fn normal_quantile_matches_table() {
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
    }
}
