//! Delta-method covariance of the optimum, Wald intervals, and a seeded Monte
//! Carlo check of the normal approximation.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::exec::Execution;
use crate::linalg::{self, serde_dense};
use crate::normal::{standard_normal_quantile, two_sided_critical_value};
use crate::optimizer::{self, CriticalPoint, OptimizerError, Region, SolveOptions, Status};
use crate::sensitivity::{self, SensitivityError, SensitivityMatrix};
use crate::surface::{DesignFit, FitResult, SecondOrderSurface, SurfaceError};

pub const MIN_REPLICATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsymptoticError {
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("noise level must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("at least {MIN_REPLICATIONS} replications are required, got {0}")]
    TooFewReplications(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

/// `D·Cov·D'`, symmetrized.
pub fn delta_covariance(
    d: &DMatrix<f64>,
    cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AsymptoticError> {
    if d.ncols() != cov.nrows() || cov.nrows() != cov.ncols() {
        return Err(AsymptoticError::DimensionMismatch {
            expected: d.ncols(),
            got: cov.nrows(),
        });
    }
    Ok(linalg::symmetrize(&(d * cov * d.transpose())))
}

/// `Ξ = (∂x*/∂β̂)·Ĉov(β̂)·(∂x*/∂β̂)'` with `Ĉov(β̂) = σ̂²(X'X)⁻¹`.
///
/// This is the finite-sample covariance of `x*(β̂)`; multiply by `N` for the
/// `√N`-normalized form.
pub fn critical_point_covariance(
    sens: &SensitivityMatrix,
    fit: &FitResult,
) -> Result<DMatrix<f64>, AsymptoticError> {
    delta_covariance(&sens.dxdbeta, &fit.cov_beta)
}

fn check_level(level: f64) -> Result<(), AsymptoticError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(AsymptoticError::InvalidLevel(level));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticReport {
    #[serde(serialize_with = "serde_dense::serialize_matrix")]
    pub xi: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    pub confidence_intervals: Vec<(f64, f64)>,
    pub level: f64,
    pub critical_value: f64,
}

/// Per-coordinate Wald intervals `x*ₖ ± z_{1−α/2}·√Ξₖₖ`.
pub fn confidence_intervals(
    cp: &CriticalPoint,
    xi: &DMatrix<f64>,
    level: f64,
) -> Result<AsymptoticReport, AsymptoticError> {
    check_level(level)?;
    let n = cp.x_star.len();
    if xi.shape() != (n, n) {
        return Err(AsymptoticError::DimensionMismatch {
            expected: n,
            got: xi.nrows(),
        });
    }
    let z = two_sided_critical_value(level);
    // Tiny negative diagonals are roundoff.
    let std_errors: Vec<f64> = (0..n).map(|k| xi[(k, k)].max(0.0).sqrt()).collect();
    let confidence_intervals = (0..n)
        .map(|k| {
            let half = z * std_errors[k];
            (cp.x_star[k] - half, cp.x_star[k] + half)
        })
        .collect();
    Ok(AsymptoticReport {
        xi: xi.clone(),
        std_errors,
        confidence_intervals,
        level,
        critical_value: z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloConfig {
    pub sigma: f64,
    pub replications: usize,
    pub seed: u64,
    pub level: f64,
    pub options: SolveOptions,
    pub exec: Execution,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            replications: 2000,
            seed: 42,
            level: 0.95,
            options: SolveOptions::default(),
            exec: Execution::default(),
        }
    }
}

/// Outcome of one simulated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub index: usize,
    pub x_star: Option<DVector<f64>>,
    pub status: Option<Status>,
    /// Whether each coordinate's interval contains the true optimum.
    pub covered: Option<Vec<bool>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloStudy {
    pub replications: usize,
    pub seed: u64,
    pub sigma: f64,
    pub level: f64,
    #[serde(serialize_with = "serde_dense::serialize_vector")]
    pub x_star_truth: DVector<f64>,
    pub status_truth: Status,
    /// Delta-method covariance at the true coefficients, `D(β)·σ²(X'X)⁻¹·D(β)'`.
    #[serde(serialize_with = "serde_dense::serialize_matrix")]
    pub xi_truth: DMatrix<f64>,
    #[serde(serialize_with = "serde_dense::serialize_vector")]
    pub empirical_mean: DVector<f64>,
    #[serde(serialize_with = "serde_dense::serialize_matrix")]
    pub empirical_cov: DMatrix<f64>,
    pub empirical_coverage: Vec<f64>,
    /// Replications entering the statistics (same status as the truth, no error).
    pub valid_count: usize,
    pub status_flip_count: usize,
    pub failure_count: usize,
    /// `‖empirical_cov − xi_truth‖_F / ‖xi_truth‖_F`; absent when `xi_truth = 0`.
    pub relative_frobenius_error: Option<f64>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

impl MonteCarloStudy {
    /// One row per replication: `replication,status,x1,…,xn`.
    pub fn records_csv(&self) -> String {
        let n = self.x_star_truth.len();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["replication".to_string(), "status".to_string()];
        header.extend((1..=n).map(|k| format!("x{k}")));
        w.write_record(&header).expect("in-memory write");
        for rec in &self.records {
            let mut row = vec![rec.index.to_string()];
            row.push(match rec.status {
                Some(Status::Interior) => "Interior".into(),
                Some(Status::Boundary) => "Boundary".into(),
                None => "Error".into(),
            });
            match &rec.x_star {
                Some(x) => row.extend(x.iter().map(|v| format!("{v:?}"))),
                None => row.extend(std::iter::repeat_n(String::new(), n)),
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Standard normal draws for replication `index`: ChaCha8 keyed by `seed` with
/// the replication index as stream id, mapped through `Φ⁻¹`.
pub fn replication_noise(seed: u64, index: usize, len: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    DVector::from_fn(len, |_, _| {
        // Midpoint of one of 2⁵³ cells, strictly inside (0, 1).
        let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        standard_normal_quantile(u)
    })
}

/// Simulates `y = Xβ + ε`, `ε ~ N(0, σ²I)`, on a fixed design and tracks the
/// fitted optimum against the delta-method prediction.
pub fn monte_carlo_study(
    truth: &SecondOrderSurface,
    region: &Region,
    design: &DMatrix<f64>,
    config: &MonteCarloConfig,
) -> Result<MonteCarloStudy, AsymptoticError> {
    check_level(config.level)?;
    if !(config.sigma.is_finite() && config.sigma >= 0.0) {
        return Err(AsymptoticError::InvalidSigma(config.sigma));
    }
    if config.replications < MIN_REPLICATIONS {
        return Err(AsymptoticError::TooFewReplications(config.replications));
    }
    if design.ncols() != truth.n() {
        return Err(AsymptoticError::DimensionMismatch {
            expected: truth.n(),
            got: design.ncols(),
        });
    }
    let factored = DesignFit::new(design)?;
    let cp_truth = optimizer::solve_with(truth, region, &config.options)?;
    let d_truth = sensitivity::sensitivity(truth, &cp_truth)?;
    let cov_truth = factored.xtx_inv() * (config.sigma * config.sigma);
    let xi_truth = delta_covariance(&d_truth.dxdbeta, &cov_truth)?;
    let mean_response = factored.design_matrix() * truth.to_coefficients().values();
    let rows = design.nrows();

    let records = config.exec.map_indices(config.replications, |index| {
        let noise = replication_noise(config.seed, index, rows);
        let y = &mean_response + noise * config.sigma;
        match replicate(&factored, &y, region, &cp_truth.x_star, config) {
            Ok((cp, covered)) => ReplicationRecord {
                index,
                x_star: Some(cp.x_star),
                status: Some(cp.status),
                covered: Some(covered),
                error: None,
            },
            Err(e) => ReplicationRecord {
                index,
                x_star: None,
                status: None,
                covered: None,
                error: Some(e.to_string()),
            },
        }
    });

    let failure_count = records.iter().filter(|r| r.error.is_some()).count();
    let status_flip_count = records
        .iter()
        .filter(|r| r.status.is_some_and(|s| s != cp_truth.status))
        .count();
    let valid: Vec<&ReplicationRecord> = records
        .iter()
        .filter(|r| r.status == Some(cp_truth.status))
        .collect();

    let n = truth.n();
    let samples: Vec<&DVector<f64>> = valid.iter().filter_map(|r| r.x_star.as_ref()).collect();
    let (empirical_mean, empirical_cov) = sample_moments(&samples, n);
    let empirical_coverage = (0..n)
        .map(|k| {
            if valid.is_empty() {
                return 0.0;
            }
            let hits = valid
                .iter()
                .filter(|r| r.covered.as_ref().is_some_and(|c| c[k]))
                .count();
            hits as f64 / valid.len() as f64
        })
        .collect();
    let truth_norm = xi_truth.norm();
    let relative_frobenius_error =
        (truth_norm > 0.0).then(|| (&empirical_cov - &xi_truth).norm() / truth_norm);

    Ok(MonteCarloStudy {
        replications: config.replications,
        seed: config.seed,
        sigma: config.sigma,
        level: config.level,
        x_star_truth: cp_truth.x_star,
        status_truth: cp_truth.status,
        xi_truth,
        empirical_mean,
        empirical_cov,
        empirical_coverage,
        valid_count: valid.len(),
        status_flip_count,
        failure_count,
        relative_frobenius_error,
        records,
    })
}

fn replicate(
    factored: &DesignFit,
    y: &DVector<f64>,
    region: &Region,
    x_truth: &DVector<f64>,
    config: &MonteCarloConfig,
) -> Result<(CriticalPoint, Vec<bool>), AsymptoticError> {
    let fit = factored.fit_response(y)?;
    let surface = fit.surface();
    let cp = optimizer::solve_with(&surface, region, &config.options)?;
    let sens = sensitivity::sensitivity(&surface, &cp)?;
    let xi = critical_point_covariance(&sens, &fit)?;
    let report = confidence_intervals(&cp, &xi, config.level)?;
    let covered = report
        .confidence_intervals
        .iter()
        .zip(x_truth.iter())
        .map(|((lo, hi), t)| lo <= t && t <= hi)
        .collect();
    Ok((cp, covered))
}

/// Mean and unbiased covariance, accumulated pairwise on deviations from the
/// first sample (identical samples give an exactly zero covariance).
fn sample_moments(samples: &[&DVector<f64>], n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let m = samples.len();
    if m == 0 {
        return (
            DVector::from_element(n, f64::NAN),
            DMatrix::from_element(n, n, f64::NAN),
        );
    }
    let shift = samples[0];
    let dev: Vec<DVector<f64>> = samples.iter().map(|x| *x - shift).collect();
    let sums: Vec<f64> = (0..n)
        .map(|i| linalg::pairwise_sum(&dev.iter().map(|d| d[i]).collect::<Vec<_>>()))
        .collect();
    let mean = DVector::from_fn(n, |i, _| shift[i] + sums[i] / m as f64);
    let mut cov = DMatrix::zeros(n, n);
    if m > 1 {
        for i in 0..n {
            for j in 0..=i {
                let products: Vec<f64> = dev.iter().map(|d| d[i] * d[j]).collect();
                let cross = linalg::pairwise_sum(&products) - sums[i] * sums[j] / m as f64;
                let value = cross / (m - 1) as f64;
                cov[(i, j)] = value;
                cov[(j, i)] = value;
            }
        }
    }
    (mean, cov)
}
