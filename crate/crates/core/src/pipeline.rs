//! End-to-end tasks: fit, bootstrap, calibrate, build intervals, and
//! assemble the result table.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::Serialize;

use crate::calibration::{bisect_delta, make_replicates, CalibrationResult, FittedModel};
use crate::data::{CalibrationSettings, ClusteredBinomial, ClusteredCounts, MixedModelData};
use crate::design::{build_design_matrices, FutureDesign, ModelSpec};
use crate::error::{Error, Result};
use crate::fitting::{fit_beta_binomial, fit_quasi_binomial, fit_quasi_poisson, fit_random_intercepts};
use crate::intervals::{
    beta_binomial_intervals, lmm_interval, quasi_binomial_intervals, quasi_poisson_interval,
    IntervalRow,
};
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    QuasiBin,
    BetaBin,
    QuasiPois,
    LmmUnstruc,
    LmmFutvec,
    LmmFutmat,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::QuasiBin,
        TaskKind::BetaBin,
        TaskKind::QuasiPois,
        TaskKind::LmmUnstruc,
        TaskKind::LmmFutvec,
        TaskKind::LmmFutmat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::QuasiBin => "quasi_bin",
            TaskKind::BetaBin => "beta_bin",
            TaskKind::QuasiPois => "quasi_pois",
            TaskKind::LmmUnstruc => "lmm_unstruc",
            TaskKind::LmmFutvec => "lmm_futvec",
            TaskKind::LmmFutmat => "lmm_futmat",
        }
    }

    pub fn is_lmm(self) -> bool {
        matches!(
            self,
            TaskKind::LmmUnstruc | TaskKind::LmmFutvec | TaskKind::LmmFutmat
        )
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::InvalidSetting(format!("unknown task kind `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub enum HistoricalData {
    Binomial(ClusteredBinomial),
    Counts(ClusteredCounts),
    Mixed(MixedModelData),
}

/// Observed future data, shown alongside the intervals with a cover flag.
#[derive(Debug, Clone, PartialEq)]
pub enum NewData {
    /// `(successes, failures)` per future cluster.
    Binomial(Vec<(u64, u64)>),
    /// Future counts, with the column name to print.
    Counts { name: String, values: Vec<u64> },
    Mixed(MixedModelData),
}

impl NewData {
    pub fn len(&self) -> usize {
        match self {
            NewData::Binomial(v) => v.len(),
            NewData::Counts { values, .. } => values.len(),
            NewData::Mixed(d) => d.n_rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub history: HistoricalData,
    /// Required for the mixed-model kinds.
    pub model: Option<ModelSpec>,
    pub future: Option<FutureDesign>,
    pub newdat: Option<NewData>,
    pub settings: CalibrationSettings,
}

/// Observed values of one future slot, as printed.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Observed {
    Binomial { succ: u64, fail: u64 },
    Count(u64),
    Mixed { response: f64, labels: Vec<String> },
}

impl Observed {
    fn value(&self) -> f64 {
        match self {
            Observed::Binomial { succ, .. } => *succ as f64,
            Observed::Count(y) => *y as f64,
            Observed::Mixed { response, .. } => *response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub observed: Option<Observed>,
    /// Number of future observations, on summary rows.
    pub m: Option<usize>,
    /// Future cluster size, binomial kinds.
    pub total: Option<u64>,
    pub hist_estimate: f64,
    pub quant_calib: f64,
    pub pred_se: f64,
    pub lower: f64,
    pub upper: f64,
    pub cover: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    pub kind: TaskKind,
    /// Names of the observed-data columns, empty without newdat.
    pub observed_columns: Vec<String>,
    /// `hist_prob` for binomial kinds, `hist_mean` otherwise.
    pub estimate_name: &'static str,
    pub rows: Vec<ResultRow>,
    pub calibration: CalibrationResult,
}

struct Resolved {
    model: FittedModel,
    future: FutureDesign,
    /// Future design used for the bootstrap; differs only for LMM tasks with M = 1.
    bootstrap_future: FutureDesign,
}

fn require_model(task: &TaskSpec) -> Result<&ModelSpec> {
    task.model
        .as_ref()
        .ok_or_else(|| Error::TaskMismatch(format!("{} needs a model formula", task.kind)))
}

fn exactly_one(task: &TaskSpec) -> Result<()> {
    match (&task.future, &task.newdat) {
        (Some(_), Some(_)) => Err(Error::TaskMismatch(format!(
            "{} takes either a future design or newdat, not both",
            task.kind
        ))),
        (None, None) => Err(Error::TaskMismatch(format!(
            "{} needs a future design or newdat",
            task.kind
        ))),
        _ => Ok(()),
    }
}

fn binomial_future(task: &TaskSpec) -> Result<FutureDesign> {
    exactly_one(task)?;
    match (&task.future, &task.newdat) {
        (Some(FutureDesign::ClusterSizes(s)), _) => {
            if s.is_empty() || s.contains(&0) {
                return Err(Error::InvalidData("future cluster sizes must be positive".into()));
            }
            Ok(FutureDesign::ClusterSizes(s.clone()))
        }
        (None, Some(NewData::Binomial(pairs))) => {
            let sizes: Vec<u64> = pairs.iter().map(|(s, f)| s + f).collect();
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::InvalidData("every newdat cluster needs at least one unit".into()));
            }
            Ok(FutureDesign::ClusterSizes(sizes))
        }
        _ => Err(Error::TaskMismatch(format!(
            "{} needs future cluster sizes or binomial newdat",
            task.kind
        ))),
    }
}

fn resolve(task: &TaskSpec) -> Result<Resolved> {
    let kind = task.kind;
    let (model, future) = match (kind, &task.history) {
        (TaskKind::QuasiBin, HistoricalData::Binomial(d)) => {
            (FittedModel::QuasiBinomial(fit_quasi_binomial(d)?), binomial_future(task)?)
        }
        (TaskKind::BetaBin, HistoricalData::Binomial(d)) => {
            (FittedModel::BetaBinomial(fit_beta_binomial(d)?), binomial_future(task)?)
        }
        (TaskKind::QuasiPois, HistoricalData::Counts(d)) => {
            exactly_one(task)?;
            let future = match (&task.future, &task.newdat) {
                (Some(FutureDesign::CountRepeats(m)), _) if *m > 0 => FutureDesign::CountRepeats(*m),
                (None, Some(NewData::Counts { values, .. })) if !values.is_empty() => {
                    FutureDesign::CountRepeats(values.len())
                }
                _ => {
                    return Err(Error::TaskMismatch(
                        "quasi_pois needs a positive number of future counts or count newdat".into(),
                    ))
                }
            };
            (FittedModel::QuasiPoisson(fit_quasi_poisson(d)?), future)
        }
        (k, HistoricalData::Mixed(d)) if k.is_lmm() => {
            let spec = require_model(task)?;
            if let Some(nd) = &task.newdat {
                if !matches!(nd, NewData::Mixed(_)) {
                    return Err(Error::TaskMismatch(format!("{k} needs mixed-model newdat")));
                }
            }
            let future = lmm_future(task, spec, d)?;
            (FittedModel::Lmm(fit_random_intercepts(d, spec)?), future)
        }
        (k, _) => {
            return Err(Error::TaskMismatch(format!(
                "historical data type does not match task {k}"
            )))
        }
    };
    let bootstrap_future = if kind.is_lmm() && future.n_slots() == 1 {
        FutureDesign::Unstructured(1)
    } else {
        future.clone()
    };
    Ok(Resolved {
        model,
        future,
        bootstrap_future,
    })
}

fn lmm_future(task: &TaskSpec, spec: &ModelSpec, hist: &MixedModelData) -> Result<FutureDesign> {
    let newdat = match &task.newdat {
        Some(NewData::Mixed(d)) => Some(d),
        _ => None,
    };
    match task.kind {
        TaskKind::LmmUnstruc => {
            exactly_one(task)?;
            match (&task.future, newdat) {
                (Some(FutureDesign::Unstructured(m)), _) if *m > 0 => Ok(FutureDesign::Unstructured(*m)),
                (None, Some(d)) => Ok(FutureDesign::Unstructured(d.n_rows())),
                _ => Err(Error::TaskMismatch(
                    "lmm_unstruc needs a positive number of future observations or newdat".into(),
                )),
            }
        }
        TaskKind::LmmFutvec => match &task.future {
            Some(FutureDesign::RowSubset(rows)) => {
                if rows.is_empty() {
                    return Err(Error::TaskMismatch("futvec is empty".into()));
                }
                for &r in rows {
                    if r == 0 || r > hist.n_rows() {
                        return Err(Error::RowOutOfRange {
                            index: r,
                            rows: hist.n_rows(),
                        });
                    }
                }
                if let Some(d) = newdat {
                    if d.n_rows() != rows.len() {
                        return Err(Error::TaskMismatch(format!(
                            "newdat has {} rows but futvec selects {}",
                            d.n_rows(),
                            rows.len()
                        )));
                    }
                }
                Ok(FutureDesign::RowSubset(rows.clone()))
            }
            _ => Err(Error::TaskMismatch("lmm_futvec needs futvec row indices".into())),
        },
        TaskKind::LmmFutmat => {
            exactly_one(task)?;
            match (&task.future, newdat) {
                (Some(FutureDesign::ExplicitMatrices(dm)), _) => {
                    Ok(FutureDesign::ExplicitMatrices(dm.aligned_to(spec)?))
                }
                (None, Some(d)) => Ok(FutureDesign::ExplicitMatrices(build_design_matrices(d, spec)?)),
                _ => Err(Error::TaskMismatch(
                    "lmm_futmat needs explicit future matrices or newdat".into(),
                )),
            }
        }
        _ => unreachable!("not a mixed-model task"),
    }
}

fn intervals_at(model: &FittedModel, future: &FutureDesign, delta: f64, task: &TaskSpec) -> Result<Vec<IntervalRow>> {
    let alt = task.settings.alternative;
    match (model, future) {
        (FittedModel::QuasiBinomial(f), FutureDesign::ClusterSizes(s)) => {
            quasi_binomial_intervals(f, s, delta, alt)
        }
        (FittedModel::BetaBinomial(f), FutureDesign::ClusterSizes(s)) => {
            beta_binomial_intervals(f, s, delta, alt)
        }
        (FittedModel::QuasiPoisson(f), fd) => quasi_poisson_interval(f, fd.n_slots(), delta, alt),
        (FittedModel::Lmm(f), fd) => lmm_interval(f, fd.n_slots(), delta, alt),
        _ => unreachable!("future design resolved per model"),
    }
}

fn hist_estimate(model: &FittedModel) -> f64 {
    match model {
        FittedModel::QuasiBinomial(f) => f.pi_hat,
        FittedModel::BetaBinomial(f) => f.pi_hat,
        FittedModel::QuasiPoisson(f) => f.lambda_hat,
        FittedModel::Lmm(f) => f.mu_hat,
    }
}

fn observed_rows(newdat: &NewData) -> (Vec<String>, Vec<Observed>) {
    match newdat {
        NewData::Binomial(pairs) => (
            vec!["succ".into(), "fail".into()],
            pairs
                .iter()
                .map(|&(succ, fail)| Observed::Binomial { succ, fail })
                .collect(),
        ),
        NewData::Counts { name, values } => (
            vec![name.clone()],
            values.iter().map(|&y| Observed::Count(y)).collect(),
        ),
        NewData::Mixed(d) => {
            let mut cols = vec![d.response_name().to_string()];
            cols.extend(d.factors().iter().map(|f| f.name.clone()));
            let rows = (0..d.n_rows())
                .map(|i| Observed::Mixed {
                    response: d.response()[i],
                    labels: d.factors().iter().map(|f| f.labels[i].clone()).collect(),
                })
                .collect();
            (cols, rows)
        }
    }
}

/// The fitted historical model of a task, without any bootstrap.
pub fn fit_task(task: &TaskSpec) -> Result<FittedModel> {
    Ok(resolve(task)?.model)
}

/// Interval rows of a task at a fixed `δ`, bypassing calibration.
pub fn intervals_for(task: &TaskSpec, delta: f64) -> Result<(FittedModel, Vec<IntervalRow>)> {
    let r = resolve(task)?;
    let rows = intervals_at(&r.model, &r.future, delta, task)?;
    Ok((r.model, rows))
}

/// Runs a task: fit, bootstrap, bisection for `δ`, intervals at `δ`, table.
pub fn run_task(task: &TaskSpec) -> Result<ResultTable> {
    task.settings.validate()?;
    let resolved = resolve(task)?;
    let stream = RandomStream::new(task.settings.seed);
    let replicates = make_replicates(
        &resolved.model,
        &resolved.bootstrap_future,
        task.settings.nboot,
        &stream,
    )?;
    let calibration = bisect_delta(&replicates, &task.settings)?;
    let delta = calibration.delta;
    let intervals = intervals_at(&resolved.model, &resolved.future, delta, task)?;
    let estimate = hist_estimate(&resolved.model);
    let binomial = matches!(task.kind, TaskKind::QuasiBin | TaskKind::BetaBin);
    let sizes = match &resolved.future {
        FutureDesign::ClusterSizes(s) => Some(s.clone()),
        _ => None,
    };
    let make_row = |iv: &IntervalRow, observed: Option<Observed>, m: Option<usize>| {
        let cover = observed
            .as_ref()
            .map(|o| iv.lower <= o.value() && o.value() <= iv.upper);
        ResultRow {
            observed,
            m,
            total: sizes.as_ref().map(|s| s[iv.m_index]),
            hist_estimate: estimate,
            quant_calib: delta,
            pred_se: iv.pred_se,
            lower: iv.lower,
            upper: iv.upper,
            cover,
        }
    };

    let (observed_columns, rows) = match &task.newdat {
        Some(nd) => {
            let (cols, obs) = observed_rows(nd);
            let rows = intervals
                .iter()
                .zip(obs)
                .map(|(iv, o)| make_row(iv, Some(o), None))
                .collect();
            (cols, rows)
        }
        None if binomial => (Vec::new(), intervals.iter().map(|iv| make_row(iv, None, None)).collect()),
        None => (
            Vec::new(),
            vec![make_row(&intervals[0], None, Some(intervals.len()))],
        ),
    };
    Ok(ResultTable {
        kind: task.kind,
        observed_columns,
        estimate_name: if binomial { "hist_prob" } else { "hist_mean" },
        rows,
        calibration,
    })
}

/// Formats `v` with six significant digits, without trailing zeros.
pub fn format_sig6(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    if rounded == 0.0 {
        "0".into()
    } else {
        rounded.to_string()
    }
}

fn format_full(v: f64) -> String {
    if v.is_infinite() {
        format_sig6(v)
    } else {
        v.to_string()
    }
}

impl ResultTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = self.observed_columns.clone();
        if self.rows.first().is_some_and(|r| r.m.is_some()) {
            h.push("m".into());
        }
        if self.rows.first().is_some_and(|r| r.total.is_some()) {
            h.push("total".into());
        }
        h.extend(
            [self.estimate_name, "quant_calib", "pred_se", "lower", "upper"]
                .iter()
                .map(|s| s.to_string()),
        );
        if self.rows.first().is_some_and(|r| r.cover.is_some()) {
            h.push("cover".into());
        }
        h
    }

    /// Rows as printed: six significant digits, `quant_calib` at full precision.
    pub fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut rec = Vec::new();
                match &r.observed {
                    Some(Observed::Binomial { succ, fail }) => {
                        rec.push(succ.to_string());
                        rec.push(fail.to_string());
                    }
                    Some(Observed::Count(y)) => rec.push(y.to_string()),
                    Some(Observed::Mixed { response, labels }) => {
                        rec.push(response.to_string());
                        rec.extend(labels.iter().cloned());
                    }
                    None => {}
                }
                if let Some(m) = r.m {
                    rec.push(m.to_string());
                }
                if let Some(t) = r.total {
                    rec.push(t.to_string());
                }
                rec.push(format_sig6(r.hist_estimate));
                rec.push(format_full(r.quant_calib));
                rec.push(format_sig6(r.pred_se));
                rec.push(format_sig6(r.lower));
                rec.push(format_sig6(r.upper));
                if let Some(c) = r.cover {
                    rec.push(if c { "TRUE" } else { "FALSE" }.into());
                }
                rec
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for rec in self.records() {
            w.write_record(rec)?;
        }
        w.flush()
    }
}
