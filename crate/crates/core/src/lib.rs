//! Second-order response surface analysis.
//!
//! The crate fits the full quadratic model
//! `y(x) = β₀ + β₁'x + x'Bx` to experimental data by least squares, locates the
//! minimum of the fitted surface over the spherical region `‖x‖ ≤ c` through the
//! Kuhn–Tucker system, differentiates the optimum with respect to the estimated
//! coefficients, and propagates `Cov(β̂)` to an asymptotic covariance of the
//! optimum.
//!
//! Module map:
//!
//! - [`surface`]: design rows, design matrix, least-squares fit.
//! - [`optimizer`]: interior/boundary solutions and KKT certification.
//! - [`sensitivity`]: `M(x)`, the bordered KKT Jacobian and `∂x*/∂β̂`.
//! - [`asymptotics`]: delta-method covariance, Wald intervals, Monte Carlo check.
//! - [`pipeline`]: end-to-end analysis report used by the CLI.
//! - [`cli`]: CSV ingestion, command dispatch and exit codes.

pub mod asymptotics;
pub mod cli;
pub mod exec;
pub mod linalg;
pub mod normal;
pub mod optimizer;
pub mod pipeline;
pub mod sensitivity;
pub mod surface;

pub use asymptotics::{
    confidence_intervals, critical_point_covariance, monte_carlo_study, AsymptoticError,
    AsymptoticReport, MonteCarloConfig, MonteCarloStudy,
};
pub use exec::Execution;
pub use optimizer::{
    solve, solve_with, CriticalPoint, OptimizerError, Region, SolveOptions, Status,
};
pub use pipeline::{analyze, AnalysisReport, AnalyzeOptions, PipelineError};
pub use sensitivity::{SensitivityError, SensitivityMatrix, SensitivityMethod};
pub use surface::{
    fit, CoefficientVector, Dataset, DesignFit, FitResult, SecondOrderSurface, SurfaceError,
};
