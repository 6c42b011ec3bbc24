//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsm_core::optimizer::{solve_interior, Region};
use rsm_core::SecondOrderSurface;

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rotatable central composite design for two factors: 4 factorial, 4 axial at
/// ±√2 and `n_center` center runs.
pub fn ccd2(n_center: usize) -> DMatrix<f64> {
    let a = 2f64.sqrt();
    let mut rows = vec![
        [-1.0, -1.0],
        [1.0, -1.0],
        [-1.0, 1.0],
        [1.0, 1.0],
        [a, 0.0],
        [-a, 0.0],
        [0.0, a],
        [0.0, -a],
    ];
    rows.extend(std::iter::repeat_n([0.0, 0.0], n_center));
    DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j])
}

/// Central composite design in `n` factors: 2ⁿ factorial, 2n axial at `±√n`,
/// `n_center` center runs.
pub fn ccd(n: usize, n_center: usize) -> DMatrix<f64> {
    let alpha = (n as f64).sqrt();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for mask in 0..(1usize << n) {
        rows.push(
            (0..n)
                .map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 })
                .collect(),
        );
    }
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut r = vec![0.0; n];
            r[i] = sign * alpha;
            rows.push(r);
        }
    }
    for _ in 0..n_center {
        rows.push(vec![0.0; n]);
    }
    DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j])
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; independent of the crate's inverse-CDF sampler.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    a.qr().q()
}

/// `Q diag(e) Q'`, with exact symmetry enforced.
pub fn symmetric_with_spectrum(rng: &mut ChaCha8Rng, eigenvalues: &[f64]) -> DMatrix<f64> {
    let n = eigenvalues.len();
    let q = random_orthogonal(rng, n);
    let m = &q * DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues)) * q.transpose();
    (&m + m.transpose()) * 0.5
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    symmetric_with_spectrum(rng, &e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Interior,
    Boundary,
}

/// Random strictly convex surface and a radius placing the optimum inside or on
/// the sphere with a comfortable complementarity margin.
pub fn convex_instance(rng: &mut ChaCha8Rng, n: usize, kind: Kind) -> (SecondOrderSurface, Region) {
    let b = random_spd(rng, n, 0.5, 3.0);
    let beta1 = random_vector(rng, n);
    let s = SecondOrderSurface::new(normal(rng), beta1, b).unwrap();
    let free = solve_interior(&s).unwrap().norm();
    let factor = match kind {
        Kind::Interior => rng.random_range(1.3..3.0),
        Kind::Boundary => rng.random_range(0.3..0.8),
    };
    (s, Region::new(factor * free).unwrap())
}

/// Bisection on `‖−½(B + λI)⁻¹β₁‖ − c` over `(lo, hi)`, using fresh linear solves.
pub fn bisect_secular(s: &SecondOrderSurface, c: f64, mut lo: f64, mut hi: f64) -> f64 {
    let n = s.n();
    let norm_at = |lambda: f64| {
        let m = s.b() + DMatrix::identity(n, n) * lambda;
        (m.lu().solve(s.beta1()).unwrap() * 0.5).norm()
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_at(mid) > c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `M(x)` assembled literally from the blocks `(0 | Iₙ | 2diag(x) | C₁ | … | Cₙ₋₁)`,
/// where `Cᵢ` stacks `i − 1` zero rows, the row `x'Aᵢ`, and `xᵢ·Iₙ₋ᵢ`, and
/// `Aᵢ` stacks `i` zero rows over `Iₙ₋ᵢ`.
pub fn m_matrix_from_blocks(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut blocks: Vec<DMatrix<f64>> = vec![
        DMatrix::zeros(n, 1),
        DMatrix::identity(n, n),
        DMatrix::from_diagonal(&(x * 2.0)),
    ];
    for i in 1..n {
        let w = n - i;
        let mut a = DMatrix::zeros(n, w);
        a.view_mut((i, 0), (w, w))
            .copy_from(&DMatrix::identity(w, w));
        let mut c = DMatrix::zeros(n, w);
        c.row_mut(i - 1).copy_from(&(x.transpose() * &a));
        c.view_mut((i, 0), (w, w))
            .copy_from(&(DMatrix::identity(w, w) * x[i - 1]));
        blocks.push(c);
    }
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut m = DMatrix::zeros(n, cols);
    let mut at = 0;
    for b in blocks {
        m.view_mut((0, at), (n, b.ncols())).copy_from(&b);
        at += b.ncols();
    }
    m
}

/// `(x, λ) ↦ (β₁ + 2(B + λI)x, ‖x‖² − c²)`.
pub fn kkt_map(s: &SecondOrderSurface, c: f64, x: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let n = s.n();
    let g = s.beta1() + (s.b() + DMatrix::identity(n, n) * lambda) * x * 2.0;
    let mut out = DVector::zeros(n + 1);
    out.rows_mut(0, n).copy_from(&g);
    out[n] = x.norm_squared() - c * c;
    out
}

/// Least-squares solution through the SVD pseudo-inverse.
pub fn pinv_solve(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = x.clone().svd(true, true);
    svd.pseudo_inverse(1e-14).unwrap() * y
}

/// `P(|T_ν| ≤ z)` for Student's t with `ν` degrees of freedom, via statrs.
pub fn t_coverage(dof: f64, z: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let t = StudentsT::new(0.0, 1.0, dof).unwrap();
    t.cdf(z) - t.cdf(-z)
}
