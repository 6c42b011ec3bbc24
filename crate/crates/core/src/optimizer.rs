//! Minimization of the fitted surface over the ball `‖x‖² ≤ c²`.
//!
//! With `L(x, λ) = ŷ(x) + λ(‖x‖² − c²)` the Kuhn–Tucker point satisfies
//! `β₁ + 2(B + λI)x = 0`, `‖x‖² ≤ c²`, `λ(‖x‖² − c²) = 0`, `λ ≥ 0`.
//!
//! For strictly convex `B` the minimizer is either the unconstrained stationary
//! point `−½B⁻¹β₁` (interior, `λ = 0`) or lies on the sphere, where `λ` is the
//! root of the secular equation `‖x(λ)‖ = c` with `x(λ) = −½(B + λI)⁻¹β₁`.
//! Indefinite `B` is accepted on request: the search is then restricted to
//! `λ > −λ_min(B)`, which gives the global minimizer on the sphere unless the
//! linear term has no weight on the lowest eigenspace (the hard case).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::serde_dense;
use crate::sensitivity::build_m_matrix;
use crate::surface::SecondOrderSurface;

/// Relative tolerance on `λ_min(B)` for positive definiteness.
pub const DEFINITENESS_TOLERANCE: f64 = 1e-12;
/// Target accuracy `|‖x(λ)‖ − c| ≤ tol·c` of the secular iteration.
pub const SECULAR_TOLERANCE: f64 = 1e-12;
/// Accuracy below which a boundary solution is reported as unconverged.
pub const BOUNDARY_ACCEPT_TOLERANCE: f64 = 1e-10;
pub const MAX_SECULAR_ITERATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("radius must be finite and strictly positive, got {0}")]
    InvalidRadius(f64),
    #[error("B is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotConvex { min_eigenvalue: f64 },
    #[error("hard case: linear term is orthogonal to the lowest eigenspace of B")]
    HardCase,
    #[error("constraint is inactive: unconstrained optimum has norm {interior_norm} < c")]
    BoundaryInactive { interior_norm: f64 },
    #[error("secular equation did not converge (relative error {relative_error:e})")]
    SecularNotConverged { relative_error: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// The experimental region `{x : ‖x‖² ≤ c²}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Region {
    radius: f64,
}

impl Region {
    pub fn new(radius: f64) -> Result<Self, OptimizerError> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(OptimizerError::InvalidRadius(radius));
        }
        Ok(Self { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Interior,
    Boundary,
}

/// Residuals of the four Kuhn–Tucker conditions at a candidate point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `‖β₁ + 2(B + λI)x‖`
    pub stationarity: f64,
    /// `max(0, ‖x‖² − c²)`
    pub primal: f64,
    /// `|λ(‖x‖² − c²)|`
    pub complementarity: f64,
    /// `max(0, −λ)`
    pub dual: f64,
    /// Gap between the `M(x)β + 2λx` and `β₁ + 2(B + λI)x` forms of the gradient.
    #[serde(skip)]
    pub stationarity_forms_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalPoint {
    #[serde(serialize_with = "serde_dense::serialize_vector")]
    pub x_star: DVector<f64>,
    pub lambda_star: f64,
    pub status: Status,
    pub residuals: KktResiduals,
    /// Boundary solution of a non-convex surface.
    pub extension: bool,
    /// `false` only for a boundary point with `λ* = 0`.
    pub strict_complementarity: bool,
}

impl CriticalPoint {
    /// `λ*` on the boundary, `c − ‖x*‖` in the interior.
    pub fn complementarity_margin(&self, region: &Region) -> f64 {
        match self.status {
            Status::Boundary => self.lambda_star,
            Status::Interior => region.radius() - self.x_star.norm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub min_eigenvalue_b: f64,
    pub spectral_norm_b: f64,
    pub is_strictly_convex: bool,
}

pub fn convexity(s: &SecondOrderSurface) -> ConvexityReport {
    let eig = s.b().clone().symmetric_eigenvalues();
    convexity_from_eigenvalues(eig.as_slice())
}

fn convexity_from_eigenvalues(eigenvalues: &[f64]) -> ConvexityReport {
    let min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let norm = eigenvalues.iter().fold(0.0_f64, |a, e| a.max(e.abs()));
    ConvexityReport {
        min_eigenvalue_b: min,
        spectral_norm_b: norm,
        is_strictly_convex: min > DEFINITENESS_TOLERANCE * norm.max(1.0),
    }
}

/// `ŷ(x) + λ(‖x‖² − c²)`.
pub fn lagrangian(
    s: &SecondOrderSurface,
    x: &DVector<f64>,
    lambda: f64,
    r: &Region,
) -> Result<f64, OptimizerError> {
    let y = s
        .predict(x)
        .map_err(|_| OptimizerError::DimensionMismatch {
            expected: s.n(),
            got: x.len(),
        })?;
    Ok(y + lambda * (x.norm_squared() - r.radius() * r.radius()))
}

/// `x* = −½B⁻¹β₁` for positive definite `B`.
pub fn solve_interior(s: &SecondOrderSurface) -> Result<DVector<f64>, OptimizerError> {
    let report = convexity(s);
    if !report.is_strictly_convex {
        return Err(OptimizerError::NotConvex {
            min_eigenvalue: report.min_eigenvalue_b,
        });
    }
    let chol = s.b().clone().cholesky().ok_or(OptimizerError::NotConvex {
        min_eigenvalue: report.min_eigenvalue_b,
    })?;
    Ok(chol.solve(s.beta1()) * -0.5)
}

/// Root of the secular equation and the corresponding point on the sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySolution {
    pub x: DVector<f64>,
    pub lambda: f64,
    pub iterations: usize,
}

/// `‖x(λ)‖` in the eigenbasis of `B`: `x(λ) = −½ Σ qᵢ gᵢ / (dᵢ + λ)`, `g = Q'β₁`.
struct Secular<'a> {
    eigenvalues: &'a [f64],
    weights: Vec<f64>,
}

impl Secular<'_> {
    /// `(φ(λ), φ'(λ))` with `φ = ‖x(λ)‖`.
    fn eval(&self, lambda: f64) -> (f64, f64) {
        let mut sq = 0.0;
        let mut dsq = 0.0;
        for (d, g2) in self.eigenvalues.iter().zip(&self.weights) {
            if *g2 == 0.0 {
                continue;
            }
            let shifted = d + lambda;
            sq += g2 / (shifted * shifted);
            dsq += g2 / (shifted * shifted * shifted);
        }
        let phi = 0.5 * sq.sqrt();
        // d(φ²)/dλ = −½ Σ gᵢ² / (dᵢ + λ)³
        let dphi = -0.5 * dsq / (2.0 * phi);
        (phi, dphi)
    }
}

/// Boundary solution `(x(λ*), λ*)` with `‖x(λ*)‖ = c` and `λ* ≥ max(0, −λ_min(B))`.
///
/// Newton's method on `ψ(λ) = 1/‖x(λ)‖ − 1/c`, safeguarded by a bisection bracket.
pub fn solve_boundary(
    s: &SecondOrderSurface,
    r: &Region,
) -> Result<BoundarySolution, OptimizerError> {
    let eig = SymmetricEigen::new(s.b().clone());
    solve_boundary_eigen(s, r, &eig)
}

fn solve_boundary_eigen(
    s: &SecondOrderSurface,
    r: &Region,
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
) -> Result<BoundarySolution, OptimizerError> {
    let c = r.radius();
    let d = eig.eigenvalues.as_slice();
    let report = convexity_from_eigenvalues(d);
    let scale = report.spectral_norm_b.max(1.0);
    let lam_min = report.min_eigenvalue_b;
    let beta1_norm = s.beta1().norm();

    if beta1_norm == 0.0 {
        return if report.is_strictly_convex {
            Err(OptimizerError::BoundaryInactive { interior_norm: 0.0 })
        } else {
            Err(OptimizerError::HardCase)
        };
    }

    let g = eig.eigenvectors.transpose() * s.beta1();
    let weights: Vec<f64> = g.iter().map(|v| v * v).collect();
    let lo = (-lam_min).max(0.0);

    // Terms whose denominator vanishes at the lower end of the admissible range.
    let pole_tol = DEFINITENESS_TOLERANCE * scale;
    let pole_weight: f64 = d
        .iter()
        .zip(&weights)
        .filter(|(di, _)| **di + lo <= pole_tol)
        .map(|(_, w)| w)
        .sum();
    let has_pole = pole_weight > (1e-10 * beta1_norm).powi(2);
    // Near the pole φ ≈ ½√w/(λ − lo), so the root sits about ½√w/c above lo.
    if has_pole && !report.is_strictly_convex && 0.5 * pole_weight.sqrt() / c <= pole_tol {
        return Err(OptimizerError::HardCase);
    }

    if !has_pole {
        let regular = Secular {
            eigenvalues: d,
            weights: d
                .iter()
                .zip(&weights)
                .map(|(di, w)| if *di + lo <= pole_tol { 0.0 } else { *w })
                .collect(),
        };
        let (phi_lo, _) = regular.eval(lo);
        let touching_pole = d.iter().any(|di| *di + lo <= pole_tol);
        if touching_pole && phi_lo <= c {
            return Err(OptimizerError::HardCase);
        }
        if !touching_pole {
            if (phi_lo - c).abs() <= SECULAR_TOLERANCE * c {
                let x = boundary_point(eig, &g, lo);
                return Ok(BoundarySolution {
                    x,
                    lambda: lo,
                    iterations: 0,
                });
            }
            if phi_lo < c {
                return Err(OptimizerError::BoundaryInactive {
                    interior_norm: phi_lo,
                });
            }
        }
    }

    let secular = Secular {
        eigenvalues: d,
        weights,
    };
    // φ(λ) ≤ ½‖β₁‖ / (λ_min + λ), so φ(hi) ≤ c.
    let mut hi = (0.5 * beta1_norm / c - lam_min).max(lo);
    if hi <= lo {
        hi = lo + f64::EPSILON * scale;
    }
    let mut lo_b = lo;
    let mut hi_b = hi;
    let mut lambda = hi;
    let mut iterations = 0;
    let mut best = (f64::INFINITY, lambda);
    let mut polish = 0;
    while iterations < MAX_SECULAR_ITERATIONS {
        iterations += 1;
        let (phi, dphi) = secular.eval(lambda);
        let err = (phi - c).abs();
        if err < best.0 {
            best = (err, lambda);
        } else if best.0 <= SECULAR_TOLERANCE * c {
            // Polishing stopped improving.
            break;
        }
        if err <= SECULAR_TOLERANCE * c {
            polish += 1;
            if polish > 3 || err == 0.0 {
                break;
            }
        }
        if phi > c {
            lo_b = lo_b.max(lambda);
        } else {
            hi_b = hi_b.min(lambda);
        }
        // ψ = 1/φ − 1/c, ψ' = −φ'/φ²
        let psi = 1.0 / phi - 1.0 / c;
        let dpsi = -dphi / (phi * phi);
        let mut next = lambda - psi / dpsi;
        if !(next.is_finite() && next > lo_b && next < hi_b) {
            next = 0.5 * (lo_b + hi_b);
        }
        if next == lambda {
            break;
        }
        lambda = next;
    }
    let lambda = best.1;
    let x = boundary_point(eig, &g, lambda);
    let relative_error = (x.norm() - c).abs() / c;
    if relative_error > BOUNDARY_ACCEPT_TOLERANCE {
        return Err(OptimizerError::SecularNotConverged { relative_error });
    }
    Ok(BoundarySolution {
        x,
        lambda,
        iterations,
    })
}

fn boundary_point(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    g: &DVector<f64>,
    lambda: f64,
) -> DVector<f64> {
    let coords = DVector::from_fn(g.len(), |i, _| {
        let shifted = eig.eigenvalues[i] + lambda;
        if g[i] == 0.0 {
            0.0
        } else {
            -0.5 * g[i] / shifted
        }
    });
    &eig.eigenvectors * coords
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveOptions {
    /// Accept indefinite `B` and search for the global boundary minimizer.
    pub allow_nonconvex: bool,
}

pub fn solve(s: &SecondOrderSurface, r: &Region) -> Result<CriticalPoint, OptimizerError> {
    solve_with(s, r, &SolveOptions::default())
}

/// Constrained minimizer with its multiplier and KKT residuals.
pub fn solve_with(
    s: &SecondOrderSurface,
    r: &Region,
    options: &SolveOptions,
) -> Result<CriticalPoint, OptimizerError> {
    let c = r.radius();
    let eig = SymmetricEigen::new(s.b().clone());
    let report = convexity_from_eigenvalues(eig.eigenvalues.as_slice());

    if report.is_strictly_convex {
        let x = solve_interior(s)?;
        let norm = x.norm();
        if (norm - c).abs() <= SECULAR_TOLERANCE * c {
            // Unconstrained optimum exactly on the sphere: λ* = 0 on an active constraint.
            return Ok(finish(s, r, x, 0.0, Status::Boundary, false, false));
        }
        if norm < c {
            return Ok(finish(s, r, x, 0.0, Status::Interior, false, true));
        }
    } else if !options.allow_nonconvex {
        return Err(OptimizerError::NotConvex {
            min_eigenvalue: report.min_eigenvalue_b,
        });
    }

    let sol = solve_boundary_eigen(s, r, &eig)?;
    let strict = sol.lambda > 0.0;
    Ok(finish(
        s,
        r,
        sol.x,
        sol.lambda,
        Status::Boundary,
        !report.is_strictly_convex,
        strict,
    ))
}

fn finish(
    s: &SecondOrderSurface,
    r: &Region,
    x: DVector<f64>,
    lambda: f64,
    status: Status,
    extension: bool,
    strict_complementarity: bool,
) -> CriticalPoint {
    let residuals = residuals_at(s, r, &x, lambda);
    CriticalPoint {
        x_star: x,
        lambda_star: lambda,
        status,
        residuals,
        extension,
        strict_complementarity,
    }
}

fn residuals_at(s: &SecondOrderSurface, r: &Region, x: &DVector<f64>, lambda: f64) -> KktResiduals {
    let n = s.n();
    let shifted = s.b() + DMatrix::identity(n, n) * lambda;
    let grad = s.beta1() + (&shifted * x) * 2.0;
    let m = build_m_matrix(x);
    let grad_m = m.matrix() * s.to_coefficients().values() + x * (2.0 * lambda);
    let slack = x.norm_squared() - r.radius() * r.radius();
    KktResiduals {
        stationarity: grad.norm(),
        primal: slack.max(0.0),
        complementarity: (lambda * slack).abs(),
        dual: (-lambda).max(0.0),
        stationarity_forms_gap: (grad - grad_m).norm(),
    }
}

/// Evaluates the Kuhn–Tucker residuals at `cp`.
pub fn kkt_certificate(
    s: &SecondOrderSurface,
    r: &Region,
    cp: &CriticalPoint,
) -> Result<KktResiduals, OptimizerError> {
    if cp.x_star.len() != s.n() {
        return Err(OptimizerError::DimensionMismatch {
            expected: s.n(),
            got: cp.x_star.len(),
        });
    }
    Ok(residuals_at(s, r, &cp.x_star, cp.lambda_star))
}
