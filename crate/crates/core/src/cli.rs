//! Command-line front end.
//!
//! Input CSV: mandatory header `x1,…,xn,y`, then one run per row, decimal-point
//! reals. Coefficient JSON: `{"beta": [...], "n": 2, "radius": 1.0}` with `n`
//! and `radius` optional; the output of `rsm fit` (`beta_hat`) is accepted too.
//!
//! Exit codes: 0 success, 2 usage or data error, 3 numerical failure. Errors
//! are written to stderr as one JSON object.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::asymptotics::{self, AsymptoticError, MonteCarloConfig};
use crate::exec::Execution;
use crate::optimizer::{self, CriticalPoint, OptimizerError, Region, SolveOptions};
use crate::pipeline::{self, AnalyzeOptions, PipelineError};
use crate::sensitivity::{SensitivityError, DEFAULT_FD_STEP};
use crate::surface::{self, CoefficientVector, Dataset, FitResult, SurfaceError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("header must be x1,...,xn,y (found {found:?})")]
    MissingHeader { found: String },
    #[error("row {row}: expected {expected} columns, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {column}: {value:?} is not a finite number")]
    NonNumericCell {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("invalid coefficient file: {0}")]
    InvalidCoefficients(String),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Asymptotic(#[from] AsymptoticError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Surface(e) => e.into(),
            PipelineError::Optimizer(e) => e.into(),
            PipelineError::Sensitivity(e) => e.into(),
            PipelineError::Asymptotic(e) => e.into(),
        }
    }
}

fn surface_kind(e: &SurfaceError) -> (&'static str, bool) {
    match e {
        SurfaceError::RankDeficient { .. } => ("RankDeficient", true),
        SurfaceError::InsufficientData { .. } => ("InsufficientData", false),
        SurfaceError::EmptyDataset => ("EmptyDataset", false),
        SurfaceError::NonFinite { .. } => ("NonFinite", false),
        SurfaceError::CoefficientLength { .. } => ("CoefficientLength", false),
        SurfaceError::DimensionMismatch { .. } => ("DimensionMismatch", false),
        SurfaceError::NoFactors => ("NoFactors", false),
        SurfaceError::NotSymmetric => ("NotSymmetric", false),
    }
}

fn optimizer_kind(e: &OptimizerError) -> (&'static str, bool) {
    match e {
        OptimizerError::InvalidRadius(_) => ("InvalidArgument", false),
        OptimizerError::DimensionMismatch { .. } => ("DimensionMismatch", false),
        OptimizerError::NotConvex { .. } => ("NotConvex", true),
        OptimizerError::HardCase => ("HardCase", true),
        OptimizerError::BoundaryInactive { .. } => ("BoundaryInactive", true),
        OptimizerError::SecularNotConverged { .. } => ("SecularNotConverged", true),
    }
}

fn sensitivity_kind(e: &SensitivityError) -> (&'static str, bool) {
    match e {
        SensitivityError::Optimizer(e) => optimizer_kind(e),
        SensitivityError::SingularJacobian { .. } => ("SingularJacobian", true),
        SensitivityError::StrictComplementarityViolated { .. } => {
            ("StrictComplementarityViolated", true)
        }
        SensitivityError::StatusFlip { .. } => ("StatusFlip", true),
        SensitivityError::NotConvex => ("NotConvex", true),
        SensitivityError::WrongStatus(_) => ("WrongStatus", true),
        SensitivityError::InvalidStep(_) => ("InvalidArgument", false),
        SensitivityError::DimensionMismatch { .. } => ("DimensionMismatch", false),
    }
}

impl CliError {
    /// Machine-readable error kind and whether it is a numerical failure.
    fn classify(&self) -> (&'static str, bool) {
        match self {
            CliError::InvalidArgument(_) => ("InvalidArgument", false),
            CliError::Io { .. } => ("Io", false),
            CliError::MissingHeader { .. } => ("MissingHeader", false),
            CliError::RaggedRow { .. } => ("RaggedRow", false),
            CliError::NonNumericCell { .. } => ("NonNumericCell", false),
            CliError::InvalidCoefficients(_) => ("InvalidCoefficients", false),
            CliError::Surface(e) => surface_kind(e),
            CliError::Optimizer(e) => optimizer_kind(e),
            CliError::Sensitivity(e) => sensitivity_kind(e),
            CliError::Asymptotic(e) => match e {
                AsymptoticError::Surface(e) => surface_kind(e),
                AsymptoticError::Optimizer(e) => optimizer_kind(e),
                AsymptoticError::Sensitivity(e) => sensitivity_kind(e),
                AsymptoticError::InvalidLevel(_)
                | AsymptoticError::InvalidSigma(_)
                | AsymptoticError::TooFewReplications(_) => ("InvalidArgument", false),
                AsymptoticError::DimensionMismatch { .. } => ("DimensionMismatch", false),
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        self.classify().0
    }

    pub fn exit_code(&self) -> i32 {
        if self.classify().1 {
            EXIT_NUMERICAL
        } else {
            EXIT_DATA
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = json!({ "error": self.kind(), "message": self.to_string() });
        let (row, column) = match self {
            CliError::RaggedRow { row, .. } => (Some(*row), None),
            CliError::NonNumericCell { row, column, .. } => (Some(*row), Some(*column)),
            _ => (None, None),
        };
        if let Some(row) = row {
            obj["row"] = json!(row);
        }
        if let Some(column) = column {
            obj["column"] = json!(column);
        }
        obj
    }
}

/// Reads `x1,…,xn,y` CSV. Row numbers in errors count the header as row 1.
pub fn parse_csv(path: &Path) -> Result<Dataset, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Io {
        path: path.display().to_string(),
        message: "file is not valid UTF-8".into(),
    })?;
    parse_csv_str(&text)
}

pub fn parse_csv_str(text: &str) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(CliError::MissingHeader {
                found: e.to_string(),
            })
        }
        None => {
            return Err(CliError::MissingHeader {
                found: String::new(),
            })
        }
    };
    let names: Vec<&str> = header.iter().collect();
    let n = names.len().saturating_sub(1);
    let valid_header = n >= 1
        && names[n] == "y"
        && names[..n]
            .iter()
            .enumerate()
            .all(|(i, name)| *name == format!("x{}", i + 1));
    if !valid_header {
        return Err(CliError::MissingHeader {
            found: names.join(","),
        });
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, record) in records.enumerate() {
        let record = record.map_err(|e| CliError::Io {
            path: format!("record {}", k + 2),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(k + 2, |p| p.line() as usize);
        if record.len() != n + 1 {
            return Err(CliError::RaggedRow {
                row,
                expected: n + 1,
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CliError::NonNumericCell {
                    row,
                    column: j + 1,
                    value: cell.to_string(),
                })?;
            if j < n {
                xs.push(value);
            } else {
                ys.push(value);
            }
        }
    }
    let rows = ys.len();
    Ok(Dataset::new(
        DMatrix::from_row_slice(rows, n, &xs),
        DVector::from_vec(ys),
    )?)
}

#[derive(Debug, Deserialize)]
struct CoefficientFile {
    #[serde(alias = "beta_hat")]
    beta: Vec<f64>,
    n: Option<usize>,
    radius: Option<f64>,
}

/// Loads a coefficient JSON file, returning the surface and an optional radius.
pub fn parse_coefficients(
    path: &Path,
) -> Result<(surface::SecondOrderSurface, Option<f64>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let file: CoefficientFile =
        serde_json::from_str(&text).map_err(|e| CliError::InvalidCoefficients(e.to_string()))?;
    let coefficients = match file.n {
        Some(n) => CoefficientVector::new(DVector::from_vec(file.beta), n),
        None => CoefficientVector::from_slice(&file.beta),
    }
    .map_err(|e| CliError::InvalidCoefficients(e.to_string()))?;
    Ok((surface::unpack(&coefficients), file.radius))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Fit,
    Optimize,
    Analyze,
    Simulate,
}

/// Validated settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: CommandKind,
    pub data_path: Option<PathBuf>,
    pub truth_path: Option<PathBuf>,
    pub radius: Option<f64>,
    pub level: f64,
    pub fd_check: bool,
    pub h: f64,
    pub replications: usize,
    pub sigma: f64,
    pub seed: u64,
    pub allow_nonconvex: bool,
    pub sequential: bool,
    pub output_path: Option<PathBuf>,
    pub samples_csv: Option<PathBuf>,
}

impl RunConfig {
    fn new(command: CommandKind) -> Self {
        Self {
            command,
            data_path: None,
            truth_path: None,
            radius: None,
            level: 0.95,
            fd_check: false,
            h: DEFAULT_FD_STEP,
            replications: 2000,
            sigma: 0.05,
            seed: 42,
            allow_nonconvex: false,
            sequential: false,
            output_path: None,
            samples_csv: None,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(r) = self.radius {
            if !(r.is_finite() && r > 0.0) {
                return Err(CliError::InvalidArgument(format!(
                    "--radius must be > 0, got {r}"
                )));
            }
        } else if matches!(self.command, CommandKind::Optimize | CommandKind::Analyze) {
            return Err(CliError::InvalidArgument("--radius is required".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::InvalidArgument(format!(
                "--level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(CliError::InvalidArgument(format!(
                "--h must be > 0, got {}",
                self.h
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(CliError::InvalidArgument(format!(
                "--sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.data_path.is_none() {
            let flag = if self.command == CommandKind::Simulate {
                "--design"
            } else {
                "--data"
            };
            return Err(CliError::InvalidArgument(format!("{flag} is required")));
        }
        if self.command == CommandKind::Simulate && self.truth_path.is_none() {
            return Err(CliError::InvalidArgument("--truth is required".into()));
        }
        Ok(())
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            allow_nonconvex: self.allow_nonconvex,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rsm",
    version,
    about = "Second-order response surface optimum and its uncertainty"
)]
#[command(allow_negative_numbers = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Least-squares fit of the second-order model.
    Fit(FitArgs),
    /// Fit and minimize over the sphere of radius c.
    Optimize(OptimizeArgs),
    /// Full pipeline: fit, optimum, sensitivity, covariance and intervals.
    Analyze(AnalyzeArgs),
    /// Monte Carlo study of the optimum on a fixed design.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write the report here instead of stdout.
    #[arg(long = "out")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub radius: f64,
    /// Accept an indefinite quadratic part (boundary search only).
    #[arg(long)]
    pub allow_nonconvex: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub radius: f64,
    #[arg(long, default_value_t = 0.95, allow_hyphen_values = true)]
    pub level: f64,
    /// Compare with central finite differences of the solver.
    #[arg(long)]
    pub fd_check: bool,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = DEFAULT_FD_STEP, allow_hyphen_values = true)]
    pub h: f64,
    #[arg(long)]
    pub allow_nonconvex: bool,
    /// Disable parallel evaluation.
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Coefficient JSON of the true surface.
    #[arg(long)]
    pub truth: PathBuf,
    /// CSV with the factor settings (`x1,…,xn,y`; responses are ignored).
    #[arg(long)]
    pub design: PathBuf,
    /// Region radius; overrides a `radius` field in the coefficient file.
    #[arg(long, allow_hyphen_values = true)]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    pub sigma: f64,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.95, allow_hyphen_values = true)]
    pub level: f64,
    #[arg(long)]
    pub allow_nonconvex: bool,
    #[arg(long)]
    pub sequential: bool,
    /// Also write per-replication optima as CSV.
    #[arg(long)]
    pub samples_csv: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

impl From<Command> for RunConfig {
    fn from(cmd: Command) -> Self {
        match cmd {
            Command::Fit(a) => RunConfig {
                data_path: Some(a.data),
                output_path: a.output.out,
                ..RunConfig::new(CommandKind::Fit)
            },
            Command::Optimize(a) => RunConfig {
                data_path: Some(a.data),
                radius: Some(a.radius),
                allow_nonconvex: a.allow_nonconvex,
                output_path: a.output.out,
                ..RunConfig::new(CommandKind::Optimize)
            },
            Command::Analyze(a) => RunConfig {
                data_path: Some(a.data),
                radius: Some(a.radius),
                level: a.level,
                fd_check: a.fd_check,
                h: a.h,
                allow_nonconvex: a.allow_nonconvex,
                sequential: a.sequential,
                output_path: a.output.out,
                ..RunConfig::new(CommandKind::Analyze)
            },
            Command::Simulate(a) => RunConfig {
                data_path: Some(a.design),
                truth_path: Some(a.truth),
                radius: a.radius,
                sigma: a.sigma,
                replications: a.reps,
                seed: a.seed,
                level: a.level,
                allow_nonconvex: a.allow_nonconvex,
                sequential: a.sequential,
                samples_csv: a.samples_csv,
                output_path: a.output.out,
                ..RunConfig::new(CommandKind::Simulate)
            },
        }
    }
}

#[derive(Serialize)]
struct OptimizeReport<'a> {
    fit: &'a FitResult,
    critical_point: &'a CriticalPoint,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serialization");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Runs one command and returns the report text; nothing is written on error.
pub fn render(config: &RunConfig) -> Result<String, CliError> {
    config.validate()?;
    let data_path = config.data_path.as_deref().expect("validated");
    match config.command {
        CommandKind::Fit => {
            let data = parse_csv(data_path)?;
            Ok(to_json(&surface::fit(&data)?))
        }
        CommandKind::Optimize => {
            let data = parse_csv(data_path)?;
            let region = Region::new(config.radius.expect("validated"))?;
            let fit = surface::fit(&data)?;
            let cp = optimizer::solve_with(&fit.surface(), &region, &config.solve_options())?;
            Ok(to_json(&OptimizeReport {
                fit: &fit,
                critical_point: &cp,
            }))
        }
        CommandKind::Analyze => {
            let data = parse_csv(data_path)?;
            let region = Region::new(config.radius.expect("validated"))?;
            let options = AnalyzeOptions {
                level: config.level,
                fd_check: config.fd_check,
                fd_step: config.h,
                solve: config.solve_options(),
                exec: config.exec(),
            };
            Ok(to_json(&pipeline::analyze(&data, &region, &options)?))
        }
        CommandKind::Simulate => {
            let design = parse_csv(data_path)?;
            let (truth, file_radius) =
                parse_coefficients(config.truth_path.as_deref().expect("validated"))?;
            let radius = config.radius.or(file_radius).ok_or_else(|| {
                CliError::InvalidArgument(
                    "--radius is required unless the coefficient file has a radius".into(),
                )
            })?;
            let region = Region::new(radius)?;
            let mc = MonteCarloConfig {
                sigma: config.sigma,
                replications: config.replications,
                seed: config.seed,
                level: config.level,
                options: config.solve_options(),
                exec: config.exec(),
            };
            let study = asymptotics::monte_carlo_study(&truth, &region, design.factors(), &mc)?;
            if let Some(path) = &config.samples_csv {
                write_file(path, &study.records_csv())?;
            }
            Ok(to_json(&study))
        }
    }
}

/// Runs `config`, writing the report to `--out` or `stdout`.
pub fn run(config: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let report = render(config)?;
    match &config.output_path {
        Some(path) => write_file(path, &report),
        None => stdout
            .write_all(report.as_bytes())
            .map_err(|e| CliError::Io {
                path: "<stdout>".into(),
                message: e.to_string(),
            }),
    }
}

/// Parses `args`, runs, reports errors on `stderr`, returns the exit status.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(stderr, "{e}");
            return if code == 0 { EXIT_OK } else { EXIT_DATA };
        }
    };
    let config = RunConfig::from(cli.command);
    match run(&config, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.to_json());
            e.exit_code()
        }
    }
}
