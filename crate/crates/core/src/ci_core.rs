//! Constructive-interference precoding when the transmitter has at least as
//! many antennas as users.

use thiserror::Error;

use crate::baselines::{rank_one_precoder, Precoder, Scheme, GRAM_MAX_CONDITION};
use crate::modem::{Component, SymbolFrame};
use crate::numerics::{hermitian_inverse, inverse_symmetric, CMat, CVec, NumericsError, RMat, RVec};
use crate::qp::{
    qp_setup, solve_active_set, solve_closed_form_dual, solve_oracle, InverseMode, QpError, QpProblem,
    QpSolution, DEFAULT_ITER_MAX,
};

/// Condition number above which the reordered power matrix is rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CiError {
    #[error("expected K <= Nt, got K = {k}, Nt = {nt}")]
    Overloaded { k: usize, nt: usize },
    #[error("expected K > Nt, got K = {k}, Nt = {nt}")]
    NotOverloaded { k: usize, nt: usize },
    #[error("frame has {found} users, channel has {k}")]
    Length { k: usize, found: usize },
    #[error("power must be positive, got {0}")]
    Power(f64),
    #[error("channel Gram matrix is singular: {0}")]
    SingularChannel(NumericsError),
    #[error("power matrix is ill-conditioned (condition {0:.3e})")]
    IllConditioned(f64),
    #[error("null space has dimension {found}, expected {expected}")]
    RankAnomaly { expected: usize, found: usize },
    #[error("dual objective vanished")]
    ZeroObjective,
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Which solver handles the dual problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpSolver {
    ActiveSet { iter_max: usize },
    ClosedForm,
    Oracle,
}

impl QpSolver {
    pub const ACTIVE_SET: QpSolver = QpSolver::ActiveSet {
        iter_max: DEFAULT_ITER_MAX,
    };

    pub fn solve(self, p: &QpProblem) -> Result<QpSolution, QpError> {
        match self {
            QpSolver::ActiveSet { iter_max } => solve_active_set(p, iter_max),
            QpSolver::ClosedForm => solve_closed_form_dual(&qp_setup(p)?),
            QpSolver::Oracle => solve_oracle(p),
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            QpSolver::ActiveSet { .. } => Scheme::CiIterative,
            QpSolver::ClosedForm => Scheme::CiClosedForm,
            QpSolver::Oracle => Scheme::CiOracle,
        }
    }
}

/// Reordering that puts outer components first, each block in ascending
/// original index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    /// `order[r]` is the original index placed at position `r`.
    order: Vec<usize>,
    outer: usize,
}

impl Permutation {
    pub fn from_mask(mask: &[Component]) -> Self {
        let mut order: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == Component::Outer).collect();
        let outer = order.len();
        order.extend((0..mask.len()).filter(|&i| mask[i] == Component::Inner));
        Self { order, outer }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn outer_count(&self) -> usize {
        self.outer
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The permutation matrix `F` with `(F x)[r] = x[order[r]]`.
    pub fn matrix(&self) -> RMat {
        let n = self.len();
        RMat::from_fn(n, n, |r, c| if self.order[r] == c { 1.0 } else { 0.0 })
    }

    /// `F x`
    pub fn apply(&self, x: &RVec) -> RVec {
        RVec::from_fn(self.len(), |r, _| x[self.order[r]])
    }

    /// `Fᵀ y`
    pub fn unapply(&self, y: &RVec) -> RVec {
        let mut x = RVec::zeros(self.len());
        for (r, &i) in self.order.iter().enumerate() {
            x[i] = y[r];
        }
        x
    }

    /// `F A Fᵀ`
    pub fn conjugate(&self, a: &RMat) -> RMat {
        let n = self.len();
        RMat::from_fn(n, n, |r, c| a[(self.order[r], self.order[c])])
    }

    /// `F A` for a matrix with one row per component.
    pub fn apply_rows(&self, a: &RMat) -> RMat {
        RMat::from_fn(self.len(), a.ncols(), |r, c| a[(self.order[r], c)])
    }
}

/// `diag(s_Eᴴ) Uᴴ A U diag(s_E)` for a `K × K` matrix `A`.
pub(crate) fn expand_gram(a: &CMat, s_e: &CVec) -> CMat {
    let m = s_e.len();
    CMat::from_fn(m, m, |i, j| s_e[i].conj() * a[(i / 2, j / 2)] * s_e[j])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiGeometry {
    pub t: CMat,
    pub v: RMat,
    pub perm: Permutation,
    /// `F V Fᵀ`
    pub v_tilde: RMat,
    pub gram_inv: CMat,
    pub frame: SymbolFrame,
}

impl CiGeometry {
    pub fn f(&self) -> RMat {
        self.perm.matrix()
    }
}

pub(crate) fn check_inputs(h: &CMat, frame: &SymbolFrame) -> Result<(usize, usize), CiError> {
    let (k, nt) = h.shape();
    if frame.users() != k {
        return Err(CiError::Length {
            k,
            found: frame.users(),
        });
    }
    Ok((k, nt))
}

pub fn build_geometry(h: &CMat, frame: &SymbolFrame) -> Result<CiGeometry, CiError> {
    let (k, nt) = check_inputs(h, frame)?;
    if k > nt {
        return Err(CiError::Overloaded { k, nt });
    }
    let gram_inv = hermitian_inverse(&(h * h.adjoint()), GRAM_MAX_CONDITION).map_err(CiError::SingularChannel)?;
    let t = expand_gram(&gram_inv, &frame.s_e);
    let v = t.map(|z| z.re);
    let v = (&v + v.transpose()) * 0.5;
    let perm = Permutation::from_mask(&frame.mask);
    let v_tilde = perm.conjugate(&v);
    Ok(CiGeometry {
        t,
        v,
        perm,
        v_tilde,
        gram_inv,
        frame: frame.clone(),
    })
}

/// Optimal scaling of the symbol components.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSolution {
    /// Scaling per component of `s_E`, original order.
    pub omega: RVec,
    /// Common inner scale, the receivers' detection scale.
    pub t: f64,
    /// Dual vector in reordered space.
    pub u: RVec,
    pub delta0: f64,
    pub iterations: usize,
    pub completed_by_primal: bool,
    pub qp: QpSolution,
}

/// Detection scale: the common inner value, or the smallest scaling when
/// every component is outer.
pub fn inner_scale(omega: &RVec, mask: &[Component]) -> f64 {
    let inner = omega
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == Component::Inner)
        .map(|(&w, _)| w)
        .fold(f64::INFINITY, f64::min);
    if inner.is_finite() {
        inner
    } else {
        omega.min()
    }
}

pub fn solve_ci(h: &CMat, frame: &SymbolFrame, p0: f64, solver: QpSolver) -> Result<(ScalingSolution, Precoder), CiError> {
    if !(p0 > 0.0) {
        return Err(CiError::Power(p0));
    }
    let geo = build_geometry(h, frame)?;
    let (q, _) = inverse_symmetric(&geo.v_tilde, MAX_CONDITION).map_err(|e| match e {
        NumericsError::Singular { condition } => CiError::IllConditioned(condition),
        _ => CiError::IllConditioned(f64::INFINITY),
    })?;
    let problem = QpProblem::new(q, geo.perm.outer_count(), InverseMode::Exact)?.with_inverse(geo.v_tilde.clone());
    let qp = solver.solve(&problem)?;
    let objective = problem.objective(&qp.u);
    if !(objective > 0.0) {
        return Err(CiError::ZeroObjective);
    }
    let delta0 = (objective / (4.0 * p0)).sqrt();
    let omega_tilde = problem.q() * &qp.u / (2.0 * delta0);
    let omega = geo.perm.unapply(&omega_tilde);
    let mut precoder = reconstruct_from_gram(h, &geo.gram_inv, frame, &omega);
    precoder.label = solver.scheme();
    let sol = ScalingSolution {
        t: precoder.rx_scale,
        omega,
        u: qp.u.clone(),
        delta0,
        iterations: qp.iterations,
        completed_by_primal: qp.completed_by_primal,
        qp,
    };
    Ok((sol, precoder))
}

fn reconstruct_from_gram(h: &CMat, gram_inv: &CMat, frame: &SymbolFrame, omega: &RVec) -> Precoder {
    let target = frame.scaled_symbols(omega.as_slice());
    let x = h.adjoint() * (gram_inv * target);
    Precoder {
        w: rank_one_precoder(&x, &frame.s),
        x,
        rx_scale: inner_scale(omega, &frame.mask),
        label: Scheme::CiIterative,
    }
}

/// `W = (1/K) Hᴴ(HHᴴ)⁻¹ U diag(Ω) s_E ŝᵀ`.
pub fn reconstruct_precoder(h: &CMat, frame: &SymbolFrame, omega: &RVec) -> Result<Precoder, CiError> {
    let (k, nt) = check_inputs(h, frame)?;
    if k > nt {
        return Err(CiError::Overloaded { k, nt });
    }
    let gram_inv = hermitian_inverse(&(h * h.adjoint()), GRAM_MAX_CONDITION).map_err(CiError::SingularChannel)?;
    Ok(reconstruct_from_gram(h, &gram_inv, frame, omega))
}

/// Residuals of the optimality certificate of a CI solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    /// `max |H W s − U diag(Ω) s_E|`
    pub interference: f64,
    /// `| ‖W s‖² − p0 | / p0`
    pub power: f64,
    /// `max |Ω_i − t|` over inner components.
    pub inner_spread: f64,
    /// `min (Ω_o − t)` over outer components (`+∞` if none).
    pub outer_margin: f64,
    /// `max |u_o (Ω_o − t)|` over outer components.
    pub slackness: f64,
    /// `|𝟙ᵀu − 1|`
    pub dual_sum: f64,
}

/// `u` is the dual vector in reordered space.
pub fn certificate(
    h: &CMat,
    frame: &SymbolFrame,
    omega: &RVec,
    t: f64,
    u: &RVec,
    pre: &Precoder,
    p0: f64,
) -> Certificate {
    let target = frame.scaled_symbols(omega.as_slice());
    let rx = h * &pre.w * &frame.s;
    let interference = (rx - target).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let power = ((&pre.w * &frame.s).norm_squared() - p0).abs() / p0;
    let mut inner_spread: f64 = 0.0;
    let mut outer_margin = f64::INFINITY;
    for (i, &m) in frame.mask.iter().enumerate() {
        match m {
            Component::Inner => inner_spread = inner_spread.max((omega[i] - t).abs()),
            Component::Outer => outer_margin = outer_margin.min(omega[i] - t),
        }
    }
    let perm = Permutation::from_mask(&frame.mask);
    let mut slackness: f64 = 0.0;
    for r in 0..perm.outer_count() {
        let i = perm.order()[r];
        slackness = slackness.max((u[r] * (omega[i] - t)).abs());
    }
    Certificate {
        interference,
        power,
        inner_spread,
        outer_margin,
        slackness,
        dual_sum: (u.sum() - 1.0).abs(),
    }
}
