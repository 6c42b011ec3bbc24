//! Fit → optimize → sensitivity → asymptotic covariance, as one report.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::asymptotics::{self, AsymptoticError, AsymptoticReport};
use crate::exec::Execution;
use crate::linalg;
use crate::optimizer::{self, CriticalPoint, OptimizerError, Region, SolveOptions, Status};
use crate::sensitivity::{self, SensitivityError, SensitivityMatrix, DEFAULT_FD_STEP};
use crate::surface::{Dataset, DesignFit, FitResult, SurfaceError};

/// Residual variance at or below this is treated as noiseless: `Ξ` is reported as zero.
pub const NOISE_FLOOR: f64 = 1e-16;
/// Finite-difference agreement: `|a − b| ≤ max(FD_ABS_TOL, FD_REL_TOL·|b|)` entrywise.
pub const FD_ABS_TOL: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Asymptotic(#[from] AsymptoticError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    pub level: f64,
    pub fd_check: bool,
    pub fd_step: f64,
    pub solve: SolveOptions,
    pub exec: Execution,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            level: 0.95,
            fd_check: false,
            fd_step: DEFAULT_FD_STEP,
            solve: SolveOptions::default(),
            exec: Execution::default(),
        }
    }
}

/// How the implemented sensitivity compares with the alternative-sign formulas
/// (`G = 2(B − λ*I)`, `+½B⁻¹M`), and which one the finite differences support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignComparison {
    pub alternate_variant_available: bool,
    pub derived_vs_alternate: Option<f64>,
    pub fd_vs_derived: Option<f64>,
    pub fd_vs_alternate: Option<f64>,
    pub fd_agrees_with_derived: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub design_condition_number: f64,
    pub kkt_jacobian_condition: Option<f64>,
    pub strict_complementarity_margin: f64,
    /// Closed form vs. bordered solve (boundary only).
    pub closed_form_vs_bordered: Option<f64>,
    pub noise_floor_applied: bool,
    pub sign_comparison: SignComparison,
    pub finite_difference: Option<SensitivityMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub fit: FitResult,
    pub critical_point: CriticalPoint,
    pub sensitivity: SensitivityMatrix,
    pub asymptotics: AsymptoticReport,
    pub diagnostics: Diagnostics,
}

/// Entrywise `max(abs, rel·|reference|)` agreement.
pub fn fd_agreement(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> bool {
    analytic.shape() == reference.shape()
        && analytic
            .iter()
            .zip(reference.iter())
            .all(|(a, b)| (a - b).abs() <= FD_ABS_TOL.max(FD_REL_TOL * b.abs()))
}

pub fn analyze(
    data: &Dataset,
    region: &Region,
    options: &AnalyzeOptions,
) -> Result<AnalysisReport, PipelineError> {
    let factored = DesignFit::new(data.factors())?;
    let fit = factored.fit_response(data.responses())?;
    let surface = fit.surface();
    let cp = optimizer::solve_with(&surface, region, &options.solve)?;
    let sens = sensitivity::sensitivity(&surface, &cp)?;

    let (kkt_condition, closed_vs_bordered) = match cp.status {
        Status::Boundary => {
            let j = sensitivity::kkt_jacobian(&surface, &cp)?;
            let bordered = sensitivity::bordered_sensitivity(&surface, &cp)?;
            (
                Some(linalg::condition_number(&j)),
                Some(linalg::scaled_discrepancy(&sens.dxdbeta, &bordered.dxdbeta)),
            )
        }
        Status::Interior => (None, None),
    };

    let noise_floor_applied = fit.sigma2_hat <= NOISE_FLOOR;
    let xi = if noise_floor_applied {
        DMatrix::zeros(surface.n(), surface.n())
    } else {
        asymptotics::critical_point_covariance(&sens, &fit)?
    };
    let report = asymptotics::confidence_intervals(&cp, &xi, options.level)?;

    let alternate = sensitivity::alternate_sign_variant(&surface, &cp);
    let fd = if options.fd_check {
        Some(sensitivity::finite_difference_sensitivity(
            &surface,
            region,
            options.fd_step,
            &options.solve,
            options.exec,
        )?)
    } else {
        None
    };
    let sign_comparison = SignComparison {
        alternate_variant_available: alternate.is_some(),
        derived_vs_alternate: alternate
            .as_ref()
            .map(|p| linalg::max_abs(&(p - &sens.dxdbeta))),
        fd_vs_derived: fd
            .as_ref()
            .map(|f| linalg::max_abs(&(&f.dxdbeta - &sens.dxdbeta))),
        fd_vs_alternate: fd
            .as_ref()
            .zip(alternate.as_ref())
            .map(|(f, p)| linalg::max_abs(&(&f.dxdbeta - p))),
        fd_agrees_with_derived: fd.as_ref().map(|f| fd_agreement(&sens.dxdbeta, &f.dxdbeta)),
    };

    let diagnostics = Diagnostics {
        design_condition_number: factored.condition_number(),
        kkt_jacobian_condition: kkt_condition,
        strict_complementarity_margin: cp.complementarity_margin(region),
        closed_form_vs_bordered: closed_vs_bordered,
        noise_floor_applied,
        sign_comparison,
        finite_difference: fd,
    };
    Ok(AnalysisReport {
        fit,
        critical_point: cp,
        sensitivity: sens,
        asymptotics: report,
        diagnostics,
    })
}
