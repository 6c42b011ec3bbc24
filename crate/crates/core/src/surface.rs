//! The second-order model: design rows, the design matrix and its least-squares fit.
//!
//! Coefficients are ordered
//! `(β₀; β₁…βₙ; β₁₁…βₙₙ; β₁₂, β₁₃, …, β₍ₙ₋₁₎ₙ)`, cross terms lexicographic in
//! `(i, j)` with `i < j`. The same ordering is used for design rows, for the
//! columns of `M(x)` and on disk.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, serde_dense};

/// Smallest admissible ratio of extreme singular values of the design matrix.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("coefficient vector has length {got}, expected {expected} for n = {n}")]
    CoefficientLength {
        n: usize,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("number of factors must be at least 1")]
    NoFactors,
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("matrix B is not symmetric")]
    NotSymmetric,
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("{rows} observations are not enough for {params} parameters (need N > p)")]
    InsufficientData { rows: usize, params: usize },
    #[error("design matrix is rank deficient (singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
}

/// `p = 1 + n + n(n+1)/2`.
pub fn param_count(n: usize) -> usize {
    1 + n + n * (n + 1) / 2
}

/// Inverse of [`param_count`], if `p` is a valid parameter count.
pub fn factor_count(p: usize) -> Option<usize> {
    (1..=64).find(|&n| param_count(n) == p)
}

/// Lexicographic `(i, j)`, `i < j`, pairs of the cross-product block.
pub fn cross_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// `z(x) = (1, x₁…xₙ, x₁²…xₙ², x₁x₂, x₁x₃, …, xₙ₋₁xₙ)`.
pub fn design_row(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut z = DVector::zeros(param_count(n));
    z[0] = 1.0;
    for i in 0..n {
        z[1 + i] = x[i];
        z[1 + n + i] = x[i] * x[i];
    }
    for (k, (i, j)) in cross_pairs(n).enumerate() {
        z[1 + 2 * n + k] = x[i] * x[j];
    }
    z
}

/// Coefficients `β` of a second-order surface together with the declared factor count.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    n: usize,
    values: DVector<f64>,
}

impl CoefficientVector {
    pub fn new(values: DVector<f64>, n: usize) -> Result<Self, SurfaceError> {
        if n == 0 {
            return Err(SurfaceError::NoFactors);
        }
        let expected = param_count(n);
        if values.len() != expected {
            return Err(SurfaceError::CoefficientLength {
                n,
                expected,
                got: values.len(),
            });
        }
        if !linalg::is_finite_vector(&values) {
            return Err(SurfaceError::NonFinite {
                what: "coefficients",
            });
        }
        Ok(Self { n, values })
    }

    /// Infers `n` from the length.
    pub fn from_slice(values: &[f64]) -> Result<Self, SurfaceError> {
        let n = factor_count(values.len()).ok_or(SurfaceError::CoefficientLength {
            n: 0,
            expected: 0,
            got: values.len(),
        })?;
        Self::new(DVector::from_column_slice(values), n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }
}

impl Serialize for CoefficientVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.values.as_slice().serialize(s)
    }
}

/// `ŷ(x) = β₀ + β₁'x + x'Bx` with `B` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderSurface {
    beta0: f64,
    beta1: DVector<f64>,
    b: DMatrix<f64>,
}

impl SecondOrderSurface {
    pub fn new(beta0: f64, beta1: DVector<f64>, b: DMatrix<f64>) -> Result<Self, SurfaceError> {
        let n = beta1.len();
        if n == 0 {
            return Err(SurfaceError::NoFactors);
        }
        if b.nrows() != n || b.ncols() != n {
            return Err(SurfaceError::DimensionMismatch {
                expected: n,
                got: b.nrows(),
            });
        }
        if !beta0.is_finite() || !linalg::is_finite_vector(&beta1) || !linalg::is_finite_matrix(&b)
        {
            return Err(SurfaceError::NonFinite {
                what: "surface coefficients",
            });
        }
        for i in 0..n {
            for j in i + 1..n {
                if b[(i, j)] != b[(j, i)] {
                    return Err(SurfaceError::NotSymmetric);
                }
            }
        }
        Ok(Self { beta0, beta1, b })
    }

    /// Convenience constructor from a flat coefficient slice with declared `n`.
    pub fn from_beta(beta: &[f64], n: usize) -> Result<Self, SurfaceError> {
        let c = CoefficientVector::new(DVector::from_column_slice(beta), n)?;
        Ok(unpack(&c))
    }

    pub fn n(&self) -> usize {
        self.beta1.len()
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta1(&self) -> &DVector<f64> {
        &self.beta1
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<(), SurfaceError> {
        if x.len() != self.n() {
            return Err(SurfaceError::DimensionMismatch {
                expected: self.n(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<f64, SurfaceError> {
        self.check_dim(x)?;
        Ok(self.beta0 + self.beta1.dot(x) + x.dot(&(&self.b * x)))
    }

    /// `∇ŷ(x) = β₁ + 2Bx`.
    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, SurfaceError> {
        self.check_dim(x)?;
        Ok(&self.beta1 + (&self.b * x) * 2.0)
    }

    pub fn to_coefficients(&self) -> CoefficientVector {
        pack(self)
    }
}

/// `(β₀, β₁, B) → β`; cross coefficients are `βᵢⱼ = 2Bᵢⱼ`.
pub fn pack(s: &SecondOrderSurface) -> CoefficientVector {
    let n = s.n();
    let mut v = DVector::zeros(param_count(n));
    v[0] = s.beta0;
    for i in 0..n {
        v[1 + i] = s.beta1[i];
        v[1 + n + i] = s.b[(i, i)];
    }
    for (k, (i, j)) in cross_pairs(n).enumerate() {
        v[1 + 2 * n + k] = 2.0 * s.b[(i, j)];
    }
    CoefficientVector { n, values: v }
}

/// `β → (β₀, β₁, B)` with `Bᵢᵢ = βᵢᵢ` and `Bᵢⱼ = Bⱼᵢ = βᵢⱼ/2`.
pub fn unpack(c: &CoefficientVector) -> SecondOrderSurface {
    let n = c.n;
    let v = &c.values;
    let beta1 = DVector::from_fn(n, |i, _| v[1 + i]);
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        b[(i, i)] = v[1 + n + i];
    }
    for (k, (i, j)) in cross_pairs(n).enumerate() {
        let half = v[1 + 2 * n + k] / 2.0;
        b[(i, j)] = half;
        b[(j, i)] = half;
    }
    SecondOrderSurface {
        beta0: v[0],
        beta1,
        b,
    }
}

/// Factor settings (`N × n`) and responses (`N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self, SurfaceError> {
        if x.ncols() == 0 {
            return Err(SurfaceError::NoFactors);
        }
        if x.nrows() != y.len() {
            return Err(SurfaceError::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if !linalg::is_finite_matrix(&x) || !linalg::is_finite_vector(&y) {
            return Err(SurfaceError::NonFinite { what: "dataset" });
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn factors(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.y
    }

    /// Same factor settings with a new response vector.
    pub fn with_responses(&self, y: DVector<f64>) -> Result<Self, SurfaceError> {
        Self::new(self.x.clone(), y)
    }
}

/// Row `k` is `z(x_k)'`.
pub fn build_design_matrix(data: &Dataset) -> Result<DMatrix<f64>, SurfaceError> {
    design_matrix_from_factors(data.factors())
}

pub fn design_matrix_from_factors(x_raw: &DMatrix<f64>) -> Result<DMatrix<f64>, SurfaceError> {
    if x_raw.nrows() == 0 {
        return Err(SurfaceError::EmptyDataset);
    }
    let n = x_raw.ncols();
    let p = param_count(n);
    let mut x = DMatrix::zeros(x_raw.nrows(), p);
    for k in 0..x_raw.nrows() {
        let row = DVector::from_iterator(n, x_raw.row(k).iter().cloned());
        x.row_mut(k).copy_from(&design_row(&row).transpose());
    }
    Ok(x)
}

/// Least-squares estimates of the second-order model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub n: usize,
    pub beta_hat: CoefficientVector,
    pub sigma2_hat: f64,
    pub dof: usize,
    /// Residual sum of squares `y'(I − H)y`.
    pub rss: f64,
    #[serde(serialize_with = "serde_dense::serialize_matrix")]
    pub cov_beta: DMatrix<f64>,
    #[serde(skip)]
    pub xtx_inv: DMatrix<f64>,
}

impl FitResult {
    pub fn surface(&self) -> SecondOrderSurface {
        unpack(&self.beta_hat)
    }
}

/// A factored design matrix, reusable across response vectors on the same design.
///
/// `β̂` comes from the thin QR factorization `X = QR` (`Rβ̂ = Q'y`), and
/// `(X'X)⁻¹ = R⁻¹R⁻ᵀ`.
#[derive(Debug, Clone)]
pub struct DesignFit {
    n: usize,
    design: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    xtx_inv: DMatrix<f64>,
    condition: f64,
}

impl DesignFit {
    pub fn new(x_raw: &DMatrix<f64>) -> Result<Self, SurfaceError> {
        let n = x_raw.ncols();
        if n == 0 {
            return Err(SurfaceError::NoFactors);
        }
        let design = design_matrix_from_factors(x_raw)?;
        let (rows, p) = design.shape();
        if rows <= p {
            return Err(SurfaceError::InsufficientData { rows, params: p });
        }
        let (smin, smax) = linalg::singular_value_extremes(&design);
        let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
        if ratio < RANK_TOLERANCE {
            return Err(SurfaceError::RankDeficient { ratio });
        }
        let qr = design.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let r_inv = r
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .ok_or(SurfaceError::RankDeficient { ratio })?;
        let xtx_inv = linalg::symmetrize(&(&r_inv * r_inv.transpose()));
        Ok(Self {
            n,
            design,
            q,
            r,
            xtx_inv,
            condition: smax / smin,
        })
    }

    pub fn design_matrix(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn xtx_inv(&self) -> &DMatrix<f64> {
        &self.xtx_inv
    }

    /// 2-norm condition number of the design matrix.
    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    pub fn fit_response(&self, y: &DVector<f64>) -> Result<FitResult, SurfaceError> {
        let (rows, p) = self.design.shape();
        if y.len() != rows {
            return Err(SurfaceError::DimensionMismatch {
                expected: rows,
                got: y.len(),
            });
        }
        if !linalg::is_finite_vector(y) {
            return Err(SurfaceError::NonFinite { what: "responses" });
        }
        let qty = self.q.transpose() * y;
        let beta = self
            .r
            .solve_upper_triangular(&qty)
            .ok_or(SurfaceError::RankDeficient { ratio: 0.0 })?;
        let residual = y - &self.design * &beta;
        let rss = residual.norm_squared();
        let dof = rows - p;
        let sigma2_hat = rss / dof as f64;
        let cov_beta = &self.xtx_inv * sigma2_hat;
        Ok(FitResult {
            n: self.n,
            beta_hat: CoefficientVector {
                n: self.n,
                values: beta,
            },
            sigma2_hat,
            dof,
            rss,
            cov_beta,
            xtx_inv: self.xtx_inv.clone(),
        })
    }
}

pub fn fit(data: &Dataset) -> Result<FitResult, SurfaceError> {
    DesignFit::new(data.factors())?.fit_response(data.responses())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn design_row_examples() {
        assert_eq!(
            design_row(&v(&[0.0, 0.0])),
            v(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(
            design_row(&v(&[1.0, 2.0])),
            v(&[1.0, 1.0, 2.0, 1.0, 4.0, 2.0])
        );
        let z = design_row(&v(&[1.0, 1.0, 1.0]));
        assert_eq!(z.len(), 10);
        assert!(z.iter().all(|&e| e == 1.0));
    }

    #[test]
    fn param_count_inverse() {
        for n in 1..10 {
            assert_eq!(factor_count(param_count(n)), Some(n));
        }
        assert_eq!(factor_count(7), None);
    }

    #[test]
    fn design_matrix_single_row_and_empty() {
        let data = Dataset::new(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), v(&[0.0])).unwrap();
        let x = build_design_matrix(&data).unwrap();
        assert_eq!(x.row(0).transpose(), v(&[1.0, 1.0, 2.0, 1.0, 4.0, 2.0]));

        let empty = Dataset::new(DMatrix::zeros(0, 2), DVector::zeros(0)).unwrap();
        assert_eq!(build_design_matrix(&empty), Err(SurfaceError::EmptyDataset));
    }

    #[test]
    fn unpack_example_and_bad_length() {
        let s = SecondOrderSurface::from_beta(&[5.0, 1.0, 2.0, 3.0, 4.0, 6.0], 2).unwrap();
        assert_eq!(s.beta0(), 5.0);
        assert_eq!(s.beta1(), &v(&[1.0, 2.0]));
        assert_eq!(s.b(), &DMatrix::from_row_slice(2, 2, &[3.0, 3.0, 3.0, 4.0]));
        assert_eq!(pack(&s).values(), &v(&[5.0, 1.0, 2.0, 3.0, 4.0, 6.0]));

        let err = SecondOrderSurface::from_beta(&[0.0; 7], 2).unwrap_err();
        assert!(matches!(
            err,
            SurfaceError::CoefficientLength {
                expected: 6,
                got: 7,
                ..
            }
        ));
    }

    #[test]
    fn predict_examples() {
        let s = SecondOrderSurface::from_beta(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(s.predict(&v(&[3.0, -7.0])).unwrap(), 1.0);
        let s = SecondOrderSurface::from_beta(&[0.0, -2.0, 0.0, 1.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(s.predict(&v(&[1.0, 0.0])).unwrap(), -1.0);
        assert!(matches!(
            s.predict(&v(&[1.0])),
            Err(SurfaceError::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn asymmetric_b_is_rejected() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert_eq!(
            SecondOrderSurface::new(0.0, v(&[0.0, 0.0]), b),
            Err(SurfaceError::NotSymmetric)
        );
    }

    fn ccd_factors() -> DMatrix<f64> {
        let a = 2f64.sqrt();
        DMatrix::from_row_slice(
            9,
            2,
            &[
                -1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0, a, 0.0, -a, 0.0, 0.0, a, 0.0, -a, 0.0,
                0.0,
            ],
        )
    }

    #[test]
    fn insufficient_and_rank_deficient() {
        // N = p = 6.
        let x = ccd_factors().rows(0, 6).into_owned();
        let data = Dataset::new(x, DVector::zeros(6)).unwrap();
        assert_eq!(
            fit(&data).unwrap_err(),
            SurfaceError::InsufficientData { rows: 6, params: 6 }
        );

        // A 2-level factorial cannot estimate pure quadratic terms.
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.extend_from_slice(&[-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        }
        let x = DMatrix::from_row_slice(12, 2, &rows);
        let data = Dataset::new(x, DVector::zeros(12)).unwrap();
        assert!(matches!(
            fit(&data),
            Err(SurfaceError::RankDeficient { .. })
        ));
    }

    #[test]
    fn noiseless_fit_recovers_coefficients() {
        let beta = [3.0, -1.0, 0.5, 2.0, 1.5, -0.7];
        let s = SecondOrderSurface::from_beta(&beta, 2).unwrap();
        let x = ccd_factors();
        let y = DVector::from_iterator(
            x.nrows(),
            (0..x.nrows()).map(|k| s.predict(&x.row(k).transpose()).unwrap()),
        );
        let f = fit(&Dataset::new(x, y).unwrap()).unwrap();
        for (a, b) in f.beta_hat.values().iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(f.sigma2_hat <= 1e-16);
        assert_eq!(f.dof, 3);
        assert_eq!(f.cov_beta, &f.xtx_inv * f.sigma2_hat);
    }
}
