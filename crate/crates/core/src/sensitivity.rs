//! First-order sensitivity of the constrained optimum to the coefficients.
//!
//! Differentiating the active Kuhn–Tucker system
//! `β₁ + 2(B + λI)x = 0`, `‖x‖² − c² = 0` with respect to `β` gives
//!
//! ```text
//! ( ∂x*/∂β )       ( 2(B + λI)  2x )⁻¹ ( M(x) )
//! ( ∂λ*/∂β )  = −  ( 2x'         0 )   (  0   )
//! ```
//!
//! where `M(x) = ∂z'(x)/∂x` satisfies `M(x)β = β₁ + 2Bx`. Eliminating the
//! border gives the closed form `G⁻¹(x x'G⁻¹ / (x'G⁻¹x) − I) M(x)` with
//! `G = 2(B + λI)`. In the interior the constraint drops out and
//! `∂x*/∂β = −½B⁻¹M(x*)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::exec::Execution;
use crate::linalg::{self, serde_dense};
use crate::optimizer::{self, CriticalPoint, OptimizerError, Region, SolveOptions, Status};
use crate::surface::{cross_pairs, param_count, unpack, CoefficientVector, SecondOrderSurface};

/// Bordered matrices with `σ_min/σ_max` below this are treated as singular.
pub const SINGULARITY_TOLERANCE: f64 = 1e-10;
/// `λ*` must exceed this for the boundary formulas to apply.
pub const STRICT_COMPLEMENTARITY_MARGIN: f64 = 1e-10;
/// Default relative finite-difference step; coordinate `k` uses `h·(1 + |βₖ|)`.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("bordered KKT matrix is singular (singular value ratio {ratio:e})")]
    SingularJacobian { ratio: f64 },
    #[error("strict complementarity fails (λ* = {lambda:e})")]
    StrictComplementarityViolated { lambda: f64 },
    #[error("critical point status {0:?} does not fit the requested formula")]
    WrongStatus(Status),
    #[error("B is not positive definite")]
    NotConvex,
    #[error("perturbing coefficient {coordinate} changes status from {base:?} to {perturbed:?}")]
    StatusFlip {
        coordinate: usize,
        base: Status,
        perturbed: Status,
    },
    #[error("finite-difference step must be finite and positive, got {0}")]
    InvalidStep(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

/// `M(x) = ∂z'(x)/∂x`, an `n × p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MMatrix(DMatrix<f64>);

impl MMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Column blocks `(0 | Iₙ | 2·diag(x) | C₁ | … | Cₙ₋₁)`; the column of the cross term
/// `xᵢxⱼ` holds `xⱼ` in row `i` and `xᵢ` in row `j`.
pub fn build_m_matrix(x: &DVector<f64>) -> MMatrix {
    let n = x.len();
    let mut m = DMatrix::zeros(n, param_count(n));
    for i in 0..n {
        m[(i, 1 + i)] = 1.0;
        m[(i, 1 + n + i)] = 2.0 * x[i];
    }
    for (k, (i, j)) in cross_pairs(n).enumerate() {
        let col = 1 + 2 * n + k;
        m[(i, col)] = x[j];
        m[(j, col)] = x[i];
    }
    MMatrix(m)
}

fn require_boundary(cp: &CriticalPoint) -> Result<(), SensitivityError> {
    if cp.status != Status::Boundary {
        return Err(SensitivityError::WrongStatus(cp.status));
    }
    Ok(())
}

fn check_nonsingular(m: &DMatrix<f64>) -> Result<(), SensitivityError> {
    let (smin, smax) = linalg::singular_value_extremes(m);
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio < SINGULARITY_TOLERANCE || !ratio.is_finite() {
        return Err(SensitivityError::SingularJacobian { ratio });
    }
    Ok(())
}

/// `[[2(B + λ*I), 2x*], [2x*', 0]]` at a boundary critical point.
pub fn kkt_jacobian(
    s: &SecondOrderSurface,
    cp: &CriticalPoint,
) -> Result<DMatrix<f64>, SensitivityError> {
    require_boundary(cp)?;
    let sys = BorderedSystem::at(s, cp);
    let j = sys.bordered_matrix();
    check_nonsingular(&j)?;
    Ok(j)
}

/// `[[P, q], [q', 0]]` together with the right-hand side `(M(x); 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderedSystem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub rhs: DMatrix<f64>,
}

impl BorderedSystem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        rhs: DMatrix<f64>,
    ) -> Result<Self, SensitivityError> {
        let n = q.len();
        if p.shape() != (n, n) {
            return Err(SensitivityError::DimensionMismatch {
                expected: n,
                got: p.nrows(),
            });
        }
        if rhs.nrows() != n + 1 {
            return Err(SensitivityError::DimensionMismatch {
                expected: n + 1,
                got: rhs.nrows(),
            });
        }
        Ok(Self { p, q, rhs })
    }

    /// `P = 2(B + λ*I)`, `q = 2x*`, `rhs = (M(x*); 0)`.
    pub fn at(s: &SecondOrderSurface, cp: &CriticalPoint) -> Self {
        let n = s.n();
        let p = (s.b() + DMatrix::identity(n, n) * cp.lambda_star) * 2.0;
        let q = &cp.x_star * 2.0;
        let m = build_m_matrix(&cp.x_star).into_matrix();
        let mut rhs = DMatrix::zeros(n + 1, m.ncols());
        rhs.rows_mut(0, n).copy_from(&m);
        Self { p, q, rhs }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn bordered_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut j = DMatrix::zeros(n + 1, n + 1);
        j.view_mut((0, 0), (n, n)).copy_from(&self.p);
        for i in 0..n {
            j[(i, n)] = self.q[i];
            j[(n, i)] = self.q[i];
        }
        j
    }
}

/// Inverse of `[[P, Q], [Q', 0]]` by the symmetric block formula, with
/// `S = Q'P⁻¹Q`:
///
/// ```text
/// [ (I − P⁻¹Q S⁻¹Q') P⁻¹    P⁻¹Q S⁻¹ ]
/// [ S⁻¹Q'P⁻¹                −S⁻¹     ]
/// ```
///
/// Requires `P` nonsingular and `Q` of full column rank.
pub fn block_inverse(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, SensitivityError> {
    let n = p.nrows();
    let m = q.ncols();
    if q.nrows() != n || p.ncols() != n {
        return Err(SensitivityError::DimensionMismatch {
            expected: n,
            got: q.nrows(),
        });
    }
    let singular = || SensitivityError::SingularJacobian { ratio: 0.0 };
    let p_lu = p.clone().lu();
    let p_inv = p_lu.try_inverse().ok_or_else(singular)?;
    let p_inv_q = &p_inv * q;
    let schur = q.transpose() * &p_inv_q;
    let s_inv = schur.try_inverse().ok_or_else(singular)?;
    let upper_right = &p_inv_q * &s_inv;
    let upper_left = (DMatrix::identity(n, n) - &upper_right * q.transpose()) * &p_inv;
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(&upper_left);
    out.view_mut((0, n), (n, m)).copy_from(&upper_right);
    out.view_mut((n, 0), (m, n))
        .copy_from(&upper_right.transpose());
    out.view_mut((n, n), (m, m)).copy_from(&(-s_inv));
    if !linalg::is_finite_matrix(&out) {
        return Err(singular());
    }
    Ok(out)
}

/// `−J⁻¹·rhs` from a direct LU factorization and, when `P` is invertible, from
/// [`block_inverse`].
#[derive(Debug, Clone, PartialEq)]
pub struct BorderedSolution {
    pub direct: DMatrix<f64>,
    pub block: Option<DMatrix<f64>>,
}

impl BorderedSolution {
    /// Scaled entrywise gap between the two routes; zero when only one exists.
    pub fn discrepancy(&self) -> f64 {
        self.block
            .as_ref()
            .map_or(0.0, |b| linalg::scaled_discrepancy(&self.direct, b))
    }

    pub fn dxdbeta(&self) -> DMatrix<f64> {
        let n = self.direct.nrows() - 1;
        self.direct.rows(0, n).into_owned()
    }

    pub fn dlambdadbeta(&self) -> DVector<f64> {
        let n = self.direct.nrows() - 1;
        self.direct.row(n).transpose()
    }
}

pub fn solve_bordered(sys: &BorderedSystem) -> Result<BorderedSolution, SensitivityError> {
    let j = sys.bordered_matrix();
    check_nonsingular(&j)?;
    let direct = j
        .lu()
        .solve(&sys.rhs)
        .ok_or(SensitivityError::SingularJacobian { ratio: 0.0 })?
        * -1.0;
    let q = DMatrix::from_column_slice(sys.n(), 1, sys.q.as_slice());
    let block = block_inverse(&sys.p, &q).ok().map(|inv| -(inv * &sys.rhs));
    Ok(BorderedSolution { direct, block })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SensitivityMethod {
    InteriorClosedForm,
    BoundaryClosedForm,
    BorderedSolve,
    FiniteDifference,
}

/// `∂x*/∂β` (`n × p`) and, on the boundary, `∂λ*/∂β`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityMatrix {
    #[serde(serialize_with = "serde_dense::serialize_matrix")]
    pub dxdbeta: DMatrix<f64>,
    #[serde(serialize_with = "serde_dense::serialize_opt_vector")]
    pub dlambdadbeta: Option<DVector<f64>>,
    pub method: SensitivityMethod,
}

fn require_strict(cp: &CriticalPoint) -> Result<(), SensitivityError> {
    if cp.lambda_star.is_nan() || cp.lambda_star <= STRICT_COMPLEMENTARITY_MARGIN {
        return Err(SensitivityError::StrictComplementarityViolated {
            lambda: cp.lambda_star,
        });
    }
    Ok(())
}

/// Closed-form boundary sensitivity `G⁻¹(x x'G⁻¹/(x'G⁻¹x) − I)M(x)` with `G = 2(B + λ*I)`.
pub fn sensitivity_boundary(
    s: &SecondOrderSurface,
    cp: &CriticalPoint,
) -> Result<SensitivityMatrix, SensitivityError> {
    require_boundary(cp)?;
    require_strict(cp)?;
    let n = s.n();
    let g = (s.b() + DMatrix::identity(n, n) * cp.lambda_star) * 2.0;
    let (dx, dl) = boundary_closed_form(&g, &cp.x_star)?;
    Ok(SensitivityMatrix {
        dxdbeta: dx,
        dlambdadbeta: Some(dl),
        method: SensitivityMethod::BoundaryClosedForm,
    })
}

/// Returns `(∂x/∂β, ∂λ/∂β)`; the multiplier row is `−x'G⁻¹M / (2x'G⁻¹x)`.
fn boundary_closed_form(
    g: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>), SensitivityError> {
    let n = x.len();
    check_nonsingular(g)?;
    let g_inv = g
        .clone()
        .lu()
        .try_inverse()
        .ok_or(SensitivityError::SingularJacobian { ratio: 0.0 })?;
    let m = build_m_matrix(x).into_matrix();
    let g_inv_x = &g_inv * x;
    let denom = x.dot(&g_inv_x);
    if denom == 0.0 || !denom.is_finite() {
        return Err(SensitivityError::SingularJacobian { ratio: 0.0 });
    }
    let projector = (x * g_inv_x.transpose()) / denom - DMatrix::identity(n, n);
    let dx = &g_inv * projector * &m;
    let dl = (m.transpose() * &g_inv_x) * (-0.5 / denom);
    Ok((dx, dl))
}

/// Boundary sensitivity from one factorization of the bordered KKT Jacobian.
pub fn bordered_sensitivity(
    s: &SecondOrderSurface,
    cp: &CriticalPoint,
) -> Result<SensitivityMatrix, SensitivityError> {
    require_boundary(cp)?;
    require_strict(cp)?;
    let sol = solve_bordered(&BorderedSystem::at(s, cp))?;
    Ok(SensitivityMatrix {
        dxdbeta: sol.dxdbeta(),
        dlambdadbeta: Some(sol.dlambdadbeta()),
        method: SensitivityMethod::BorderedSolve,
    })
}

/// `∂x*/∂β = −½B⁻¹M(x*)` at an interior optimum.
pub fn sensitivity_interior(
    s: &SecondOrderSurface,
    cp: &CriticalPoint,
) -> Result<SensitivityMatrix, SensitivityError> {
    if cp.status != Status::Interior {
        return Err(SensitivityError::WrongStatus(cp.status));
    }
    let chol = s
        .b()
        .clone()
        .cholesky()
        .ok_or(SensitivityError::NotConvex)?;
    let m = build_m_matrix(&cp.x_star).into_matrix();
    Ok(SensitivityMatrix {
        dxdbeta: chol.solve(&m) * -0.5,
        dlambdadbeta: None,
        method: SensitivityMethod::InteriorClosedForm,
    })
}

/// Closed-form sensitivity selected by the status of `cp`.
pub fn sensitivity(
    s: &SecondOrderSurface,
    cp: &CriticalPoint,
) -> Result<SensitivityMatrix, SensitivityError> {
    match cp.status {
        Status::Interior => sensitivity_interior(s, cp),
        Status::Boundary => sensitivity_boundary(s, cp),
    }
}

/// The same formulas with the opposite sign convention:
/// `G = 2(B − λ*I)` on the boundary and `+½B⁻¹M` in the interior.
/// Used only for diagnostic comparison.
pub fn alternate_sign_variant(s: &SecondOrderSurface, cp: &CriticalPoint) -> Option<DMatrix<f64>> {
    let n = s.n();
    match cp.status {
        Status::Interior => {
            let chol = s.b().clone().cholesky()?;
            Some(chol.solve(build_m_matrix(&cp.x_star).matrix()) * 0.5)
        }
        Status::Boundary => {
            let g = (s.b() - DMatrix::identity(n, n) * cp.lambda_star) * 2.0;
            boundary_closed_form(&g, &cp.x_star).ok().map(|(dx, _)| dx)
        }
    }
}

/// Central differences of [`optimizer::solve_with`] in each coefficient.
///
/// `h` is relative: coordinate `k` is perturbed by `h·(1 + |βₖ|)`. The `2p`
/// solves are independent and scheduled by `exec`.
pub fn finite_difference_sensitivity(
    s: &SecondOrderSurface,
    r: &Region,
    h: f64,
    options: &SolveOptions,
    exec: Execution,
) -> Result<SensitivityMatrix, SensitivityError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(SensitivityError::InvalidStep(h));
    }
    let base = optimizer::solve_with(s, r, options)?;
    let beta = s.to_coefficients().into_values();
    let n = s.n();
    let p = beta.len();
    let steps: Vec<f64> = beta.iter().map(|b| h * (1.0 + b.abs())).collect();

    let solves = exec.map_indices(2 * p, |idx| {
        let k = idx / 2;
        let sign = if idx % 2 == 0 { 1.0 } else { -1.0 };
        let mut shifted = beta.clone();
        shifted[k] += sign * steps[k];
        let c = CoefficientVector::new(shifted, n).expect("length preserved");
        optimizer::solve_with(&unpack(&c), r, options)
    });

    let mut dx = DMatrix::zeros(n, p);
    let mut dl = DVector::zeros(p);
    for k in 0..p {
        let plus = solves[2 * k].clone()?;
        let minus = solves[2 * k + 1].clone()?;
        for cp in [&plus, &minus] {
            if cp.status != base.status {
                return Err(SensitivityError::StatusFlip {
                    coordinate: k,
                    base: base.status,
                    perturbed: cp.status,
                });
            }
        }
        // Realized step, exactly as represented after rounding.
        let width = (beta[k] + steps[k]) - (beta[k] - steps[k]);
        let col = (&plus.x_star - &minus.x_star) / width;
        dx.set_column(k, &col);
        dl[k] = (plus.lambda_star - minus.lambda_star) / width;
    }
    Ok(SensitivityMatrix {
        dxdbeta: dx,
        dlambdadbeta: (base.status == Status::Boundary).then_some(dl),
        method: SensitivityMethod::FiniteDifference,
    })
}
