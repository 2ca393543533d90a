//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input or flags,
//! 3 calibration did not converge and `--strict` was given.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::coverage_lab::{
    simulate_coverage, write_log_csv, write_summary_csv, LabMode, ScenarioSpec, Truth, DEFAULT_LAB_NBOOT,
};
use crate::calibration::{trace_svg, write_trace_csv};
use crate::data::{Alternative, CalibrationSettings, ClusteredBinomial, ClusteredCounts};
use crate::design::{build_design_matrices, futmat_from_json, parse_formula, DesignMatrices, FutureDesign, ModelSpec};
use crate::error::Error;
use crate::input::{read_binomial_file, read_counts_file, read_mixed_file};
use crate::pipeline::{run_task, HistoricalData, NewData, TaskKind, TaskSpec};
use crate::rng::RandomStream;
use crate::sampling::{sample_beta_binomial, sample_lmm, sample_quasi_binomial, sample_quasi_poisson};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "predcal",
    version,
    about = "Bootstrap-calibrated prediction intervals for clustered historical data"
)]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quasi-binomial prediction interval.
    QuasiBin(TaskArgs),
    /// Beta-binomial prediction interval.
    BetaBin(TaskArgs),
    /// Quasi-Poisson prediction interval.
    QuasiPois(TaskArgs),
    /// Random-intercept model, M future observations without structure.
    LmmUnstruc(TaskArgs),
    /// Random-intercept model, future layout given by historical rows.
    LmmFutvec(TaskArgs),
    /// Random-intercept model, future layout given by design matrices.
    LmmFutmat(TaskArgs),
    /// Draw data from one of the generators.
    Sample(SampleArgs),
    /// Monte Carlo coverage of a task under a known truth.
    CoverageSim(CoverageArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CalibrationArgs {
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Bootstrap replicates [default: 10000, 2000 for coverage-sim].
    #[arg(long)]
    pub nboot: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub delta_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub delta_max: f64,
    #[arg(long, default_value_t = 0.003)]
    pub tolerance: f64,
    /// Maximum number of bisection steps.
    #[arg(long, default_value_t = 30)]
    pub n_bisec: usize,
    #[arg(long, default_value = "both")]
    pub alternative: Alternative,
    #[arg(long, env = "PREDCAL_SEED", default_value_t = 1234)]
    pub seed: u64,
}

impl CalibrationArgs {
    fn settings(&self, default_nboot: usize) -> CalibrationSettings {
        CalibrationSettings {
            alpha: self.alpha,
            nboot: self.nboot.unwrap_or(default_nboot),
            delta_min: self.delta_min,
            delta_max: self.delta_max,
            tolerance: self.tolerance,
            max_bisection_steps: self.n_bisec,
            alternative: self.alternative,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    /// Historical data CSV.
    #[arg(long)]
    pub hist: PathBuf,
    /// Observed future data CSV, printed with a cover column.
    #[arg(long)]
    pub newdat: Option<PathBuf>,
    /// Future cluster sizes (binomial tasks).
    #[arg(long, value_delimiter = ',')]
    pub newsize: Vec<u64>,
    /// Number of future observations.
    #[arg(long)]
    pub m: Option<usize>,
    /// 1-based historical rows forming the future layout.
    #[arg(long, value_delimiter = ',')]
    pub futvec: Vec<usize>,
    /// JSON file with the future design matrices.
    #[arg(long)]
    pub futmat_list: Option<PathBuf>,
    /// Model formula, e.g. "y~(1|a)+(1|b)+(1|a:b)".
    #[arg(long)]
    pub formula: Option<String>,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
    /// Result table destination [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trace_csv: Option<PathBuf>,
    #[arg(long)]
    pub trace_svg: Option<PathBuf>,
    /// Exit with status 3 if the calibration does not converge.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Qbinom,
    Bbinom,
    Qpois,
    Lmm,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub model: Generator,
    /// Number of clusters.
    #[arg(long)]
    pub n: Option<usize>,
    /// Cluster size, or one size per cluster.
    #[arg(long, value_delimiter = ',')]
    pub size: Vec<u64>,
    #[arg(long)]
    pub prob: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Variance components, residual last.
    #[arg(long, value_delimiter = ',')]
    pub sigma2: Vec<f64>,
    /// Layout CSV whose factor columns define the design (lmm).
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[arg(long)]
    pub formula: Option<String>,
    #[arg(long)]
    pub futmat_list: Option<PathBuf>,
    #[arg(long, env = "PREDCAL_SEED", default_value_t = 1234)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Calibrated,
    Fixed,
    Naive,
}

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    #[arg(long, value_enum)]
    pub family: Generator,
    /// Task for the lmm family: lmm-unstruc, lmm-futvec or lmm-futmat.
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long, default_value = "scenario")]
    pub name: String,
    #[arg(long, default_value_t = 500)]
    pub n_sim: usize,
    #[arg(long, value_enum, default_value = "calibrated")]
    pub mode: ModeArg,
    /// Coefficient for `--mode fixed`.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub prob: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of historical clusters (qpois).
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Historical cluster sizes (binomial families).
    #[arg(long, value_delimiter = ',')]
    pub size: Vec<u64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sigma2: Vec<f64>,
    /// Layout CSV whose factor columns define the historical design (lmm).
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[arg(long)]
    pub formula: Option<String>,
    /// Future cluster sizes (binomial families).
    #[arg(long, value_delimiter = ',')]
    pub newsize: Vec<u64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub futvec: Vec<usize>,
    #[arg(long)]
    pub futmat_list: Option<PathBuf>,
    #[command(flatten)]
    pub calibration: CalibrationArgs,
    /// Summary CSV destination [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-simulation CSV.
    #[arg(long)]
    pub per_sim: Option<PathBuf>,
}

/// A failure with its exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonConvergence { .. } | Error::RetryBudgetExhausted { .. } => EXIT_RUNTIME,
            _ => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_error(path: Option<&Path>, e: io::Error) -> CliError {
    let message = match path {
        Some(p) => format!("{}: {e}", p.display()),
        None => e.to_string(),
    };
    CliError {
        code: EXIT_RUNTIME,
        message,
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<i32> {
    match cli.threads {
        Some(0) => Err(CliError::usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError {
                    code: EXIT_RUNTIME,
                    message: format!("cannot start {n} worker threads: {e}"),
                })?;
            pool.install(|| dispatch(cli.command))
        }
        None => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> CliResult<i32> {
    match command {
        Command::QuasiBin(a) => run_task_command(TaskKind::QuasiBin, &a),
        Command::BetaBin(a) => run_task_command(TaskKind::BetaBin, &a),
        Command::QuasiPois(a) => run_task_command(TaskKind::QuasiPois, &a),
        Command::LmmUnstruc(a) => run_task_command(TaskKind::LmmUnstruc, &a),
        Command::LmmFutvec(a) => run_task_command(TaskKind::LmmFutvec, &a),
        Command::LmmFutmat(a) => run_task_command(TaskKind::LmmFutmat, &a),
        Command::Sample(a) => run_sample(&a),
        Command::CoverageSim(a) => run_coverage(&a),
    }
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_error(Some(p), e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn reject(kind: TaskKind, flag: &str, present: bool) -> CliResult<()> {
    if present {
        Err(CliError::usage(format!("{flag} is not accepted by {}", kind.as_str().replace('_', "-"))))
    } else {
        Ok(())
    }
}

fn formula(flag_value: Option<&String>, command: &str) -> CliResult<ModelSpec> {
    let text = flag_value.ok_or_else(|| CliError::usage(format!("{command} requires --formula")))?;
    parse_formula(text).map_err(|e| CliError::usage(format!("--formula: {e}")))
}

fn read_futmat(path: &Path) -> CliResult<DesignMatrices> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    futmat_from_json(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn build_task(kind: TaskKind, a: &TaskArgs) -> CliResult<TaskSpec> {
    let settings = a.calibration.settings(10_000);
    settings
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let binomial = matches!(kind, TaskKind::QuasiBin | TaskKind::BetaBin);
    reject(kind, "--newsize", !binomial && !a.newsize.is_empty())?;
    reject(kind, "--m", binomial && a.m.is_some())?;
    reject(kind, "--formula", !kind.is_lmm() && a.formula.is_some())?;
    reject(kind, "--futvec", kind != TaskKind::LmmFutvec && !a.futvec.is_empty())?;
    reject(kind, "--futmat-list", kind != TaskKind::LmmFutmat && a.futmat_list.is_some())?;
    reject(
        kind,
        "--m",
        matches!(kind, TaskKind::LmmFutvec | TaskKind::LmmFutmat) && a.m.is_some(),
    )?;

    let (history, model, newdat) = if binomial {
        let hist = ClusteredBinomial::from_pairs(&read_binomial_file(&a.hist)?)
            .map_err(|e| CliError::usage(format!("{}: {e}", a.hist.display())))?;
        let newdat = match &a.newdat {
            Some(p) => Some(NewData::Binomial(read_binomial_file(p)?)),
            None => None,
        };
        (HistoricalData::Binomial(hist), None, newdat)
    } else if kind == TaskKind::QuasiPois {
        let (_, counts) = read_counts_file(&a.hist)?;
        let hist = ClusteredCounts::new(counts)
            .map_err(|e| CliError::usage(format!("{}: {e}", a.hist.display())))?;
        let newdat = match &a.newdat {
            Some(p) => {
                let (name, values) = read_counts_file(p)?;
                Some(NewData::Counts { name, values })
            }
            None => None,
        };
        (HistoricalData::Counts(hist), None, newdat)
    } else {
        let command = kind.as_str().replace('_', "-");
        let spec = formula(a.formula.as_ref(), &command)?;
        let hist = read_mixed_file(&a.hist, spec.response())?;
        let newdat = match &a.newdat {
            Some(p) => Some(NewData::Mixed(read_mixed_file(p, spec.response())?)),
            None => None,
        };
        (HistoricalData::Mixed(hist), Some(spec), newdat)
    };

    let future = match kind {
        TaskKind::QuasiBin | TaskKind::BetaBin if !a.newsize.is_empty() => {
            Some(FutureDesign::ClusterSizes(a.newsize.clone()))
        }
        TaskKind::QuasiPois => a.m.map(FutureDesign::CountRepeats),
        TaskKind::LmmUnstruc => a.m.map(FutureDesign::Unstructured),
        TaskKind::LmmFutvec if !a.futvec.is_empty() => Some(FutureDesign::RowSubset(a.futvec.clone())),
        TaskKind::LmmFutvec => return Err(CliError::usage("lmm-futvec requires --futvec")),
        TaskKind::LmmFutmat => match &a.futmat_list {
            Some(p) => Some(FutureDesign::ExplicitMatrices(read_futmat(p)?)),
            None => None,
        },
        _ => None,
    };
    let future_flag = match kind {
        TaskKind::QuasiBin | TaskKind::BetaBin => "--newsize",
        TaskKind::LmmFutmat => "--futmat-list",
        _ => "--m",
    };
    if kind != TaskKind::LmmFutvec {
        match (&future, &newdat) {
            (Some(_), Some(_)) => {
                return Err(CliError::usage(format!("give either {future_flag} or --newdat, not both")))
            }
            (None, None) => return Err(CliError::usage(format!("one of {future_flag} or --newdat is required"))),
            _ => {}
        }
    }
    Ok(TaskSpec {
        kind,
        history,
        model,
        future,
        newdat,
        settings,
    })
}

fn run_task_command(kind: TaskKind, a: &TaskArgs) -> CliResult<i32> {
    let task = build_task(kind, a)?;
    let table = run_task(&task)?;
    let mut out = output(a.out.as_deref())?;
    table
        .write_csv(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| io_error(a.out.as_deref(), e))?;
    if let Some(p) = &a.trace_csv {
        let f = File::create(p).map_err(|e| io_error(Some(p), e))?;
        write_trace_csv(&table.calibration, BufWriter::new(f)).map_err(|e| io_error(Some(p), e))?;
    }
    if let Some(p) = &a.trace_svg {
        let svg = trace_svg(&table.calibration, task.settings.alpha, task.settings.tolerance);
        fs::write(p, svg).map_err(|e| io_error(Some(p), e))?;
    }
    if let Some(w) = &table.calibration.warning {
        eprintln!("warning: {w}");
    }
    if a.strict && !table.calibration.converged {
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(EXIT_OK)
}

fn need<T: Copy>(v: Option<T>, flag: &str, what: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::usage(format!("{what} requires {flag}")))
}

fn cluster_sizes(size: &[u64], n: Option<usize>, what: &str) -> CliResult<Vec<u64>> {
    match (size, n) {
        ([], _) => Err(CliError::usage(format!("{what} requires --size"))),
        ([s], Some(n)) => Ok(vec![*s; n]),
        ([s], None) => Ok(vec![*s]),
        (many, None) => Ok(many.to_vec()),
        (many, Some(n)) if n == many.len() => Ok(many.to_vec()),
        (many, Some(n)) => Err(CliError::usage(format!(
            "--size lists {} clusters but --n is {n}",
            many.len()
        ))),
    }
}

fn lmm_layout(
    hist: Option<&PathBuf>,
    formula_text: Option<&String>,
    what: &str,
) -> CliResult<(crate::data::MixedModelData, ModelSpec)> {
    let spec = formula(formula_text, what)?;
    let path = hist.ok_or_else(|| CliError::usage(format!("{what} requires --hist")))?;
    let data = read_mixed_file(path, spec.response())?;
    Ok((data, spec))
}

fn run_sample(a: &SampleArgs) -> CliResult<i32> {
    let mut rng = RandomStream::new(a.seed);
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    let write_err = |e: csv::Error| io_error(a.out.as_deref(), e.into());
    match a.model {
        Generator::Qbinom | Generator::Bbinom => {
            let sizes = cluster_sizes(&a.size, a.n, "sample")?;
            let prob = need(a.prob, "--prob", "binomial sampling")?;
            let y = if a.model == Generator::Qbinom {
                sample_quasi_binomial(&sizes, prob, need(a.phi, "--phi", "qbinom")?, &mut rng)?
            } else {
                sample_beta_binomial(&sizes, prob, need(a.rho, "--rho", "bbinom")?, &mut rng)?
            };
            w.write_record(["succ", "fail"]).map_err(write_err)?;
            for (y, n) in y.iter().zip(&sizes) {
                w.write_record([y.to_string(), (n - y).to_string()]).map_err(write_err)?;
            }
        }
        Generator::Qpois => {
            let n = need(a.n, "--n", "qpois")?;
            let y = sample_quasi_poisson(
                n,
                need(a.lambda, "--lambda", "qpois")?,
                need(a.phi, "--phi", "qpois")?,
                &mut rng,
            )?;
            w.write_record(["y"]).map_err(write_err)?;
            for v in y {
                w.write_record([v.to_string()]).map_err(write_err)?;
            }
        }
        Generator::Lmm => {
            let mu = need(a.mu, "--mu", "lmm")?;
            if let Some(p) = &a.futmat_list {
                let dm = read_futmat(p)?;
                let y = sample_lmm(mu, &a.sigma2, &dm, &mut rng)?;
                let mut header = vec!["y".to_string()];
                header.extend(dm.terms().iter().map(|t| t.name.clone()));
                w.write_record(&header).map_err(write_err)?;
                for (i, v) in y.iter().enumerate() {
                    let mut rec = vec![v.to_string()];
                    rec.extend(dm.terms().iter().map(|t| t.level_labels()[t.row_levels()[i]].clone()));
                    w.write_record(&rec).map_err(write_err)?;
                }
            } else {
                let (data, spec) = lmm_layout(a.hist.as_ref(), a.formula.as_ref(), "lmm sampling")?;
                let dm = build_design_matrices(&data, &spec)?;
                let y = sample_lmm(mu, &a.sigma2, &dm, &mut rng)?;
                let mut header = vec![spec.response().to_string()];
                header.extend(data.factors().iter().map(|f| f.name.clone()));
                w.write_record(&header).map_err(write_err)?;
                for (i, v) in y.iter().enumerate() {
                    let mut rec = vec![v.to_string()];
                    rec.extend(data.factors().iter().map(|f| f.labels[i].clone()));
                    w.write_record(&rec).map_err(write_err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| io_error(a.out.as_deref(), e))?;
    Ok(EXIT_OK)
}

fn run_coverage(a: &CoverageArgs) -> CliResult<i32> {
    let settings = a.calibration.settings(DEFAULT_LAB_NBOOT);
    let binomial_future = || -> CliResult<FutureDesign> {
        if a.newsize.is_empty() {
            Err(CliError::usage("binomial families require --newsize"))
        } else {
            Ok(FutureDesign::ClusterSizes(a.newsize.clone()))
        }
    };
    let (truth, kind, future) = match a.family {
        Generator::Qbinom => (
            Truth::QuasiBinomial {
                prob: need(a.prob, "--prob", "qbinom")?,
                phi: need(a.phi, "--phi", "qbinom")?,
                sizes: cluster_sizes(&a.size, a.clusters, "qbinom")?,
            },
            TaskKind::QuasiBin,
            binomial_future()?,
        ),
        Generator::Bbinom => (
            Truth::BetaBinomial {
                prob: need(a.prob, "--prob", "bbinom")?,
                rho: need(a.rho, "--rho", "bbinom")?,
                sizes: cluster_sizes(&a.size, a.clusters, "bbinom")?,
            },
            TaskKind::BetaBin,
            binomial_future()?,
        ),
        Generator::Qpois => (
            Truth::QuasiPoisson {
                lambda: need(a.lambda, "--lambda", "qpois")?,
                phi: need(a.phi, "--phi", "qpois")?,
                clusters: need(a.clusters, "--clusters", "qpois")?,
            },
            TaskKind::QuasiPois,
            FutureDesign::CountRepeats(need(a.m, "--m", "qpois")?),
        ),
        Generator::Lmm => {
            let (layout, spec) = lmm_layout(a.hist.as_ref(), a.formula.as_ref(), "lmm")?;
            let kind = a.task.unwrap_or(TaskKind::LmmUnstruc);
            let future = match kind {
                TaskKind::LmmUnstruc => FutureDesign::Unstructured(need(a.m, "--m", "lmm-unstruc")?),
                TaskKind::LmmFutvec if !a.futvec.is_empty() => FutureDesign::RowSubset(a.futvec.clone()),
                TaskKind::LmmFutmat if a.futmat_list.is_some() => {
                    FutureDesign::ExplicitMatrices(read_futmat(a.futmat_list.as_ref().expect("checked"))?)
                }
                TaskKind::LmmFutvec => return Err(CliError::usage("lmm-futvec requires --futvec")),
                TaskKind::LmmFutmat => return Err(CliError::usage("lmm-futmat requires --futmat-list")),
                _ => return Err(CliError::usage("--task must be a mixed-model task for the lmm family")),
            };
            (
                Truth::Lmm {
                    mu: need(a.mu, "--mu", "lmm")?,
                    sigma2: a.sigma2.clone(),
                    layout,
                    spec,
                },
                kind,
                future,
            )
        }
    };
    let mode = match a.mode {
        ModeArg::Calibrated => LabMode::Calibrated,
        ModeArg::Naive => LabMode::NaiveBaseline,
        ModeArg::Fixed => LabMode::FixedDelta(need(a.delta, "--delta", "--mode fixed")?),
    };
    let scenario = ScenarioSpec {
        name: a.name.clone(),
        truth,
        kind,
        future,
        n_sim: a.n_sim,
        settings,
        mode,
    };
    let report = simulate_coverage(&scenario)?;
    let mut out = output(a.out.as_deref())?;
    write_summary_csv(std::slice::from_ref(&report), &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| io_error(a.out.as_deref(), e))?;
    if let Some(p) = &a.per_sim {
        let f = File::create(p).map_err(|e| io_error(Some(p), e))?;
        write_log_csv(&report, BufWriter::new(f)).map_err(|e| io_error(Some(p), e))?;
    }
    if report.failures > 0 {
        eprintln!(
            "warning: {} of {} simulations failed and were excluded",
            report.failures, report.n_sim
        );
    }
    Ok(EXIT_OK)
}
