//! Dense linear-algebra kernels.
//!
//! Thin layer over `nalgebra` that fixes the conventions used by the
//! precoders: relative singular-value thresholds, explicit singularity
//! errors carrying a condition estimate, and null-space extraction that
//! always returns the full set of right singular vectors.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex;
use thiserror::Error;

pub type C64 = Complex<f64>;
pub type RMat = DMatrix<f64>;
pub type CMat = DMatrix<C64>;
pub type RVec = DVector<f64>;
pub type CVec = DVector<C64>;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("singular system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, NumericsError>;

fn dims<T>(m: &DMatrix<T>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn check_square<T>(a: &DMatrix<T>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(NumericsError::DimensionMismatch {
            expected: "square matrix".into(),
            found: dims(a),
        });
    }
    Ok(())
}

pub fn all_finite<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> bool {
    a.iter().all(|x| x.clone().modulus().is_finite())
}

/// Largest relative asymmetry `max|A - Aᵀ| / max(1, max|A|)`.
pub fn asymmetry(a: &RMat) -> f64 {
    let scale = a.amax().max(1.0);
    (a - a.transpose()).amax() / scale
}

/// Solves `A x = b` for symmetric `A`.
///
/// Cholesky is tried first; indefinite or singular inputs go through the
/// symmetric eigendecomposition, which also provides the condition number
/// reported on failure.
pub fn solve_symmetric(a: &RMat, b: &RVec) -> Result<RVec> {
    check_square(a)?;
    if a.nrows() != b.len() {
        return Err(NumericsError::DimensionMismatch {
            expected: format!("rhs of length {}", a.nrows()),
            found: format!("length {}", b.len()),
        });
    }
    if !all_finite(a) || b.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(RVec::zeros(0));
    }
    let limit = 1.0 / (f64::EPSILON * n as f64);
    if let Some(chol) = a.clone().cholesky() {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
        let estimate = (hi / lo).powi(2);
        if estimate.is_finite() && estimate < limit {
            return Ok(chol.solve(b));
        }
    }
    let eig = a.clone().symmetric_eigen();
    let condition = eigen_condition(&eig.eigenvalues);
    if !(condition < limit) {
        return Err(NumericsError::Singular { condition });
    }
    let vt_b = eig.eigenvectors.transpose() * b;
    let scaled = vt_b.component_div(&eig.eigenvalues);
    Ok(&eig.eigenvectors * scaled)
}

fn eigen_condition(values: &RVec) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), l| (lo.min(l.abs()), hi.max(l.abs())));
    if hi == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Spectral condition number `max|λ| / min|λ|` of a symmetric matrix.
pub fn condition_symmetric(a: &RMat) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    eigen_condition(&a.clone().symmetric_eigenvalues())
}

/// Inverse of a symmetric matrix together with its condition number.
///
/// Fails when the condition number exceeds `max_condition`.
pub fn inverse_symmetric(a: &RMat, max_condition: f64) -> Result<(RMat, f64)> {
    check_square(a)?;
    if !all_finite(a) {
        return Err(NumericsError::NonFinite);
    }
    let eig = a.clone().symmetric_eigen();
    let condition = eigen_condition(&eig.eigenvalues);
    if !(condition <= max_condition) {
        return Err(NumericsError::Singular { condition });
    }
    let inv_diag = RMat::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let v = &eig.eigenvectors;
    let mut inv = v * inv_diag * v.transpose();
    // symmetrize away round-off
    inv = (&inv + inv.transpose()) * 0.5;
    Ok((inv, condition))
}

/// Inverse of a Hermitian positive-definite matrix such as `HHᴴ`.
///
/// Fails when the spectral condition number exceeds `max_condition`.
pub fn hermitian_inverse(a: &CMat, max_condition: f64) -> Result<CMat> {
    check_square(a)?;
    if !all_finite(a) {
        return Err(NumericsError::NonFinite);
    }
    let n = a.nrows();
    let values = a.clone().symmetric_eigenvalues();
    let condition = eigen_condition(&values);
    if !(condition <= max_condition) {
        return Err(NumericsError::Singular { condition });
    }
    let chol = a.clone().cholesky().ok_or(NumericsError::Singular { condition })?;
    let mut inv = chol.solve(&CMat::identity(n, n));
    inv = (&inv + inv.adjoint()) * C64::new(0.5, 0.0);
    Ok(inv)
}

/// Singular value decomposition `A = U diag(σ) Vᵀ` of an `m × n` matrix.
///
/// `v` is always the full `n × n` orthogonal factor, so wide matrices
/// expose their whole null space. Columns of `u` paired with zero singular
/// values are zero. Singular values are sorted in decreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: RMat,
    pub sigma: RVec,
    pub v: RMat,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
pub fn jacobi_svd(a: &RMat) -> Svd {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = RMat::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * x - s * y;
                    w[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let mut u = RMat::zeros(m, n);
    let mut sigma = RVec::zeros(n);
    let mut vs = RMat::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        sigma[k] = norms[j];
        if norms[j] > 0.0 {
            u.set_column(k, &(w.column(j) / norms[j]));
        }
        vs.set_column(k, &v.column(j));
    }
    Svd { u, sigma, v: vs }
}

/// Scalars with a pseudo-inverse computed through a real SVD.
pub trait PinvScalar: ComplexField<RealField = f64> {
    #[doc(hidden)]
    fn embed(a: &DMatrix<Self>) -> RMat;
    #[doc(hidden)]
    fn from_embedded(p: &RMat, rows: usize, cols: usize) -> DMatrix<Self>;
}

impl PinvScalar for f64 {
    fn embed(a: &RMat) -> RMat {
        a.clone()
    }

    fn from_embedded(p: &RMat, _: usize, _: usize) -> RMat {
        p.clone()
    }
}

impl PinvScalar for C64 {
    /// `[[Re A, −Im A], [Im A, Re A]]`
    fn embed(a: &CMat) -> RMat {
        let (m, n) = a.shape();
        let mut out = RMat::zeros(2 * m, 2 * n);
        for i in 0..m {
            for j in 0..n {
                let z = a[(i, j)];
                out[(i, j)] = z.re;
                out[(i, n + j)] = -z.im;
                out[(m + i, j)] = z.im;
                out[(m + i, n + j)] = z.re;
            }
        }
        out
    }

    fn from_embedded(p: &RMat, rows: usize, cols: usize) -> CMat {
        CMat::from_fn(rows, cols, |i, j| C64::new(p[(i, j)], p[(rows + i, j)]))
    }
}

fn pinv_real(a: &RMat, tol: f64) -> RMat {
    let svd = jacobi_svd(a);
    let threshold = tol * svd.sigma.max();
    let mut out = RMat::zeros(a.ncols(), a.nrows());
    for (i, &s) in svd.sigma.iter().enumerate() {
        if s > threshold && s > 0.0 {
            out += svd.v.column(i) * svd.u.column(i).transpose() / s;
        }
    }
    out
}

/// Moore–Penrose pseudo-inverse.
///
/// Singular values at or below `RANK_TOL · σ_max` are treated as zero, so a
/// zero matrix maps to the zero matrix of transposed shape.
pub fn pseudo_inverse<T: PinvScalar>(a: &DMatrix<T>) -> DMatrix<T> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    T::from_embedded(&pinv_real(&T::embed(a), RANK_TOL), n, m)
}

/// Orthonormal basis (as columns) of the numerical null space of `a`.
///
/// A right singular vector is kept when its singular value satisfies
/// `σ ≤ tol · σ_max`. Full-rank square input yields a `cols × 0` matrix.
pub fn svd_null_basis(a: &RMat, tol: f64) -> RMat {
    null_basis_with_floor(a, tol, 0.0)
}

/// Like [`svd_null_basis`] with threshold `tol · max(σ_max, floor)`.
///
/// The floor keeps a numerically-zero matrix from being treated as full
/// rank when all its singular values are round-off.
pub fn null_basis_with_floor(a: &RMat, tol: f64, floor: f64) -> RMat {
    let n = a.ncols();
    if n == 0 {
        return RMat::zeros(0, 0);
    }
    let svd = jacobi_svd(a);
    let threshold = tol * svd.sigma.max().max(floor);
    let keep: Vec<usize> = (0..n).filter(|&i| svd.sigma[i] <= threshold).collect();
    let mut basis = RMat::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &svd.v.column(i));
    }
    basis
}

/// Number of singular values above `tol · σ_max`.
pub fn numeric_rank(a: &RMat, tol: f64) -> usize {
    numeric_rank_with_floor(a, tol, 0.0)
}

pub fn numeric_rank_with_floor(a: &RMat, tol: f64, floor: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = jacobi_svd(a).sigma;
    let sigma_max = sv.max();
    if sigma_max == 0.0 {
        return 0;
    }
    let threshold = tol * sigma_max.max(floor);
    sv.iter().filter(|&&s| s > threshold).count()
}

/// Minimum-norm least-squares solution of `A x = b`.
///
/// Returns the solution and the residual norm `‖A x − b‖₂`.
pub fn lstsq_min_norm(a: &RMat, b: &RVec, tol: f64) -> Result<(RVec, f64)> {
    if a.nrows() != b.len() {
        return Err(NumericsError::DimensionMismatch {
            expected: format!("rhs of length {}", a.nrows()),
            found: format!("length {}", b.len()),
        });
    }
    if !all_finite(a) || b.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let x = pinv_real(a, tol) * b;
    let residual = (a * &x - b).norm();
    Ok((x, residual))
}

/// Solves a general square system by LU with partial pivoting.
///
/// Returns `None` when the factorization is singular.
pub fn lu_solve(a: &RMat, b: &RVec) -> Option<RVec> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return None;
    }
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Real embedding `[Re(A); Im(A)]` of a complex matrix.
pub fn stack_real_imag(a: &CMat) -> RMat {
    let (m, n) = a.shape();
    let mut out = RMat::zeros(2 * m, n);
    for i in 0..m {
        for j in 0..n {
            out[(i, j)] = a[(i, j)].re;
            out[(m + i, j)] = a[(i, j)].im;
        }
    }
    out
}

pub fn to_complex(a: &RMat) -> CMat {
    a.map(|x| C64::new(x, 0.0))
}

/// `1 − |⟨a, b⟩| / (‖a‖ ‖b‖)`.
pub fn cosine_distance(a: &CVec, b: &CVec) -> f64 {
    let inner = a.dotc(b).norm();
    1.0 - inner / (a.norm() * b.norm())
}
