//! Simplex-type quadratic program
//!
//! ```text
//! minimize   uᵀ Q u
//! subject to 𝟙ᵀu = 1,  u_n ≥ 0  for n < N
//! ```
//!
//! solved by a depth-first active-set search, a one-step closed form, and
//! exhaustive enumeration of active sets.

use thiserror::Error;

use crate::numerics::{
    asymmetry, inverse_symmetric, lstsq_min_norm, lu_solve, pseudo_inverse, solve_symmetric, RMat, RVec,
};

pub const DEFAULT_ITER_MAX: usize = 100;

/// Largest number of constrained variables the oracle will enumerate.
pub const ORACLE_MAX_N: usize = 16;

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_CONDITION: f64 = 1e12;
const FEAS_TOL: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-10;
const PRIMAL_ITER_MAX: usize = 500;

/// How `Q⁻¹` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InverseMode {
    /// `Q` is invertible.
    Exact,
    /// `Q` may be rank deficient; the Moore–Penrose inverse stands in for
    /// `Q⁻¹` and subproblems are solved in the least-squares sense.
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("Q must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("Q is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("constrained count N = {n} exceeds problem size M = {m}")]
    TooManyConstrained { n: usize, m: usize },
    #[error("empty problem")]
    Empty,
    #[error("Q is singular in exact mode (condition {condition:.3e}); use pseudo mode")]
    SingularExact { condition: f64 },
    #[error("degenerate problem: 𝟙ᵀQ⁻¹𝟙 = {0:.3e}")]
    Degenerate(f64),
    #[error("zero pivot in the closed-form update")]
    ZeroPivot,
    #[error("active-set search failed after {iterations} iterations")]
    NotConverged { iterations: usize, best: Box<QpSolution> },
    #[error("oracle limited to N <= {ORACLE_MAX_N}, got {0}")]
    OracleTooLarge(usize),
    #[error("no feasible active set found")]
    NoFeasibleSubset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    q: RMat,
    n: usize,
    mode: InverseMode,
    inverse: Option<RMat>,
}

impl QpProblem {
    pub fn new(q: RMat, n: usize, mode: InverseMode) -> Result<Self, QpError> {
        let (rows, cols) = q.shape();
        if rows != cols {
            return Err(QpError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(QpError::Empty);
        }
        if n > rows {
            return Err(QpError::TooManyConstrained { n, m: rows });
        }
        let asym = asymmetry(&q);
        if !(asym <= SYMMETRY_TOL) {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(Self {
            q,
            n,
            mode,
            inverse: None,
        })
    }

    /// Supplies a precomputed `Q⁻¹` (or `Q⁺` in pseudo mode).
    pub fn with_inverse(mut self, inverse: RMat) -> Self {
        self.inverse = Some(inverse);
        self
    }

    pub fn q(&self) -> &RMat {
        &self.q
    }

    pub fn m(&self) -> usize {
        self.q.nrows()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> InverseMode {
        self.mode
    }

    pub fn objective(&self, u: &RVec) -> f64 {
        u.dot(&(&self.q * u))
    }
}

/// Quantities derived from `Q⁻¹` that the solvers share.
#[derive(Debug, Clone, PartialEq)]
pub struct QpWorkspace {
    problem: QpProblem,
    pub q_inv: RMat,
    /// `Q⁻¹ 𝟙`
    pub a: RVec,
    /// `𝟙ᵀ a`
    pub c: f64,
    /// `a aᵀ / c`
    pub phi: RMat,
    /// First `N` columns of `Q⁻¹ − Φ`.
    pub g: RMat,
}

impl QpWorkspace {
    pub fn problem(&self) -> &QpProblem {
        &self.problem
    }

    pub fn a_constrained(&self) -> RVec {
        self.a.rows(0, self.problem.n).into_owned()
    }

    /// Leading `N × N` block of `G`.
    pub fn g_constrained(&self) -> RMat {
        let n = self.problem.n;
        self.g.view((0, 0), (n, n)).into_owned()
    }

    fn unconstrained(&self) -> RVec {
        &self.a / self.c
    }

    /// `u = ½ G q + a / c` with `q` supported on `active`.
    fn dual_from_multipliers(&self, active: &[usize], q: &RVec) -> RVec {
        let mut u = self.unconstrained();
        for (j, &col) in active.iter().enumerate() {
            u.axpy(0.5 * q[j], &self.g.column(col), 1.0);
        }
        u
    }

    /// Solves `Z q̃ = −(2/c) ã` on `active`; `None` when `Z` is singular.
    fn solve_active(&self, active: &[usize]) -> Option<(RVec, RVec)> {
        if active.is_empty() {
            return Some((self.unconstrained(), RVec::zeros(0)));
        }
        let s = active.len();
        let z = RMat::from_fn(s, s, |i, j| self.g[(active[i], active[j])]);
        let rhs = RVec::from_fn(s, |i, _| -2.0 / self.c * self.a[active[i]]);
        let q = solve_symmetric(&z, &rhs).ok()?;
        Some((self.dual_from_multipliers(active, &q), q))
    }
}

/// Dual vector and active-set bookkeeping returned by every solver.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: RVec,
    /// Constrained indices held at zero, in the order they were activated.
    pub active: Vec<usize>,
    /// Multipliers of the bound constraints, length `N`, zero off the active set.
    pub multipliers: RVec,
    pub iterations: usize,
    pub objective: f64,
    /// Set when the depth-first search stalled and the primal active-set
    /// method finished the solve.
    pub completed_by_primal: bool,
}

impl QpSolution {
    fn new(p: &QpProblem, u: RVec, active: Vec<usize>, q: &RVec, iterations: usize) -> Self {
        let mut multipliers = RVec::zeros(p.n);
        for (j, &i) in active.iter().enumerate() {
            multipliers[i] = q[j];
        }
        let objective = p.objective(&u);
        Self {
            u,
            active,
            multipliers,
            iterations,
            objective,
            completed_by_primal: false,
        }
    }

    pub fn min_constrained(&self, n: usize) -> f64 {
        min_head(&self.u, n)
    }
}

fn min_head(u: &RVec, n: usize) -> f64 {
    u.iter().take(n).copied().fold(f64::INFINITY, f64::min)
}

fn argmin(v: &RVec) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

pub fn qp_setup(p: &QpProblem) -> Result<QpWorkspace, QpError> {
    let m = p.m();
    let q_inv = match (&p.inverse, p.mode) {
        (Some(inv), _) => inv.clone(),
        (None, InverseMode::Exact) => match inverse_symmetric(&p.q, MAX_CONDITION) {
            Ok((inv, _)) => inv,
            Err(crate::numerics::NumericsError::Singular { condition }) => {
                return Err(QpError::SingularExact { condition })
            }
            Err(_) => return Err(QpError::SingularExact { condition: f64::INFINITY }),
        },
        (None, InverseMode::Pseudo) => pseudo_inverse(&p.q),
    };
    let a = q_inv.column_sum();
    let c = a.sum();
    let scale = q_inv.amax() * (m * m) as f64;
    if !(c.abs() > 16.0 * f64::EPSILON * scale) {
        return Err(QpError::Degenerate(c));
    }
    let phi = &a * a.transpose() / c;
    let g = (&q_inv - &phi).columns(0, p.n).into_owned();
    Ok(QpWorkspace {
        problem: p.clone(),
        q_inv,
        a,
        c,
        phi,
        g,
    })
}

/// KKT system of the subproblem with `active` bounds held at zero:
///
/// ```text
/// [ 2Q  𝟙  −E ] [u ]   [top]
/// [ 𝟙ᵀ  0   0 ] [q₀] = [sum]
/// [ Eᵀ  0   0 ] [q ]   [ 0 ]
/// ```
///
/// solved in the minimum-norm least-squares sense. Returns `(u, q)` or
/// `None` when the system is inconsistent.
fn kkt_solve(q: &RMat, active: &[usize], top: &RVec, sum: f64, use_lu: bool) -> Option<(RVec, RVec)> {
    let m = q.nrows();
    let s = active.len();
    if s >= m && sum != 0.0 {
        return None;
    }
    let dim = m + 1 + s;
    let mut k = RMat::zeros(dim, dim);
    k.view_mut((0, 0), (m, m)).copy_from(&(q * 2.0));
    for i in 0..m {
        k[(i, m)] = 1.0;
        k[(m, i)] = 1.0;
    }
    for (j, &i) in active.iter().enumerate() {
        k[(i, m + 1 + j)] = -1.0;
        k[(m + 1 + j, i)] = 1.0;
    }
    let mut rhs = RVec::zeros(dim);
    rhs.rows_mut(0, m).copy_from(top);
    rhs[m] = sum;
    let scale = 1.0 + k.amax();
    let accept = |x: &RVec| {
        let res = (&k * x - &rhs).norm();
        res <= 1e-9 * scale * (1.0 + x.amax())
    };
    let sol = if use_lu {
        match lu_solve(&k, &rhs) {
            Some(x) if accept(&x) => x,
            _ => lstsq_min_norm(&k, &rhs, 1e-12).ok()?.0,
        }
    } else {
        lstsq_min_norm(&k, &rhs, 1e-12).ok()?.0
    };
    if !accept(&sol) {
        return None;
    }
    Some((sol.rows(0, m).into_owned(), sol.rows(m + 1, s).into_owned()))
}

fn kkt_active(p: &QpProblem, active: &[usize]) -> Option<(RVec, RVec)> {
    kkt_solve(&p.q, active, &RVec::zeros(p.m()), 1.0, false)
}

enum Search {
    Done(QpSolution),
    Stalled(usize),
}

/// Depth-first active-set search.
///
/// At each depth the n-th most negative constrained entry of `u` (ties by
/// index) is activated. A subproblem with non-negative multipliers is
/// accepted and the search deepens; otherwise the active set is cut at the
/// most negative multiplier and that depth retries its next candidate.
fn depth_first<S>(p: &QpProblem, iter_max: usize, start: (RVec, RVec), sub: S) -> Search
where
    S: Fn(&[usize]) -> Option<(RVec, RVec)>,
{
    let n = p.n;
    let mut states = vec![start];
    let mut active: Vec<usize> = Vec::new();
    let mut ranks: Vec<usize> = Vec::new();
    let mut rank = 1;
    let mut iterations = 0;
    loop {
        let u = &states[active.len()].0;
        if min_head(u, n) >= -FEAS_TOL {
            let (u, q) = states.swap_remove(active.len());
            return Search::Done(QpSolution::new(p, u, active, &q, iterations));
        }
        if iterations >= iter_max {
            return Search::Stalled(iterations);
        }
        iterations += 1;

        let mut order: Vec<usize> = (0..n).filter(|i| !active.contains(i)).collect();
        order.sort_by(|&i, &j| u[i].total_cmp(&u[j]).then(i.cmp(&j)));
        if rank > order.len() {
            match ranks.pop() {
                Some(r) => {
                    active.pop();
                    states.truncate(active.len() + 1);
                    rank = r + 1;
                    continue;
                }
                None => return Search::Stalled(iterations),
            }
        }
        active.push(order[rank - 1]);
        ranks.push(rank);

        let cut = match sub(&active) {
            Some((u_next, q)) => {
                let tol = FEAS_TOL * (1.0 + q.amax());
                if q.min() >= -tol {
                    states.push((u_next, q));
                    rank = 1;
                    None
                } else {
                    Some(argmin(&q))
                }
            }
            None => Some(active.len() - 1),
        };
        if let Some(m) = cut {
            rank = ranks[m] + 1;
            active.truncate(m);
            ranks.truncate(m);
            states.truncate(m + 1);
        }
    }
}

/// Textbook primal active-set method from the feasible point `𝟙/M`.
fn primal_active_set(p: &QpProblem) -> Option<(QpSolution, usize)> {
    let m = p.m();
    let n = p.n;
    let mut u = RVec::from_element(m, 1.0 / m as f64);
    let mut working: Vec<usize> = Vec::new();
    for it in 1..=PRIMAL_ITER_MAX {
        let grad = -(&p.q * &u) * 2.0;
        let (step, q) = kkt_solve(&p.q, &working, &grad, 0.0, p.mode == InverseMode::Exact)?;
        if step.norm() <= 1e-9 * (1.0 + u.norm()) {
            if working.is_empty() || q.min() >= -FEAS_TOL * (1.0 + q.amax()) {
                let sol = QpSolution::new(p, u, working, &q, it);
                return Some((sol, it));
            }
            working.remove(argmin(&q));
            continue;
        }
        let mut alpha = 1.0;
        let mut block = None;
        for i in 0..n {
            if !working.contains(&i) && step[i] < 0.0 {
                let r = -u[i] / step[i];
                if r < alpha {
                    alpha = r;
                    block = Some(i);
                }
            }
        }
        u.axpy(alpha, &step, 1.0);
        if let Some(i) = block {
            u[i] = 0.0;
            working.push(i);
        }
    }
    None
}

fn solve_dfs(p: &QpProblem, iter_max: usize) -> Result<QpSolution, QpError> {
    let search = match p.mode {
        InverseMode::Exact => {
            let ws = qp_setup(p)?;
            let start = (ws.unconstrained(), RVec::zeros(0));
            depth_first(p, iter_max, start, |act| ws.solve_active(act))
        }
        InverseMode::Pseudo => {
            let start = kkt_active(p, &[]).ok_or(QpError::Degenerate(0.0))?;
            depth_first(p, iter_max, start, |act| kkt_active(p, act))
        }
    };
    match search {
        Search::Done(sol) => Ok(sol),
        Search::Stalled(spent) => match primal_active_set(p) {
            Some((mut sol, extra)) => {
                sol.iterations = spent + extra;
                sol.completed_by_primal = true;
                Ok(sol)
            }
            None => {
                let u = RVec::from_element(p.m(), 1.0 / p.m() as f64);
                let best = QpSolution::new(p, u, Vec::new(), &RVec::zeros(0), spent);
                Err(QpError::NotConverged {
                    iterations: spent,
                    best: Box::new(best),
                })
            }
        },
    }
}

/// Active-set solve.
///
/// Starts from the equality-only minimizer and returns it with zero
/// iterations when it is already feasible.
pub fn solve_active_set(p: &QpProblem, iter_max: usize) -> Result<QpSolution, QpError> {
    solve_dfs(p, iter_max)
}

/// One-step sub-optimal solution: activate only the most negative entry of
/// the unconstrained minimizer.
pub fn solve_closed_form_dual(w: &QpWorkspace) -> Result<QpSolution, QpError> {
    let p = &w.problem;
    let n = p.n;
    match p.mode {
        InverseMode::Exact => {
            let u0 = w.unconstrained();
            if n == 0 {
                return Ok(QpSolution::new(p, u0, Vec::new(), &RVec::zeros(0), 0));
            }
            let a_c = w.a_constrained();
            let k = argmin(&a_c);
            let d = a_c[k];
            if d >= 0.0 {
                return Ok(QpSolution::new(p, u0, Vec::new(), &RVec::zeros(0), 0));
            }
            let e = w.g[(k, k)];
            if !(e.abs() > f64::EPSILON * w.g.amax()) {
                return Err(QpError::ZeroPivot);
            }
            let u = (&w.a * e - w.g.column(k) * d) / (w.c * e);
            let q = RVec::from_element(1, -2.0 * d / (w.c * e));
            Ok(QpSolution::new(p, u, vec![k], &q, 0))
        }
        InverseMode::Pseudo => {
            let (u0, _) = kkt_active(p, &[]).ok_or(QpError::Degenerate(w.c))?;
            if n == 0 || min_head(&u0, n) >= 0.0 {
                return Ok(QpSolution::new(p, u0, Vec::new(), &RVec::zeros(0), 0));
            }
            let k = argmin(&u0.rows(0, n).into_owned());
            let (u, q) = kkt_active(p, &[k]).ok_or(QpError::ZeroPivot)?;
            Ok(QpSolution::new(p, u, vec![k], &q, 0))
        }
    }
}

/// Exhaustive search over all `2^N` active sets.
pub fn solve_oracle(p: &QpProblem) -> Result<QpSolution, QpError> {
    let n = p.n;
    if n > ORACLE_MAX_N {
        return Err(QpError::OracleTooLarge(n));
    }
    let m = p.m();
    let zero = RVec::zeros(m);
    let use_lu = p.mode == InverseMode::Exact;
    let mut best: Option<QpSolution> = None;
    let mut active = Vec::with_capacity(n);
    for mask in 0u32..(1u32 << n) {
        active.clear();
        active.extend((0..n).filter(|&i| mask & (1 << i) != 0));
        let Some((u, q)) = kkt_solve(&p.q, &active, &zero, 1.0, use_lu) else {
            continue;
        };
        if min_head(&u, n) < -ORACLE_TOL || q.iter().any(|&x| x < -ORACLE_TOL) {
            continue;
        }
        let cand = QpSolution::new(p, u, active.clone(), &q, 0);
        if best.as_ref().is_none_or(|b| cand.objective < b.objective) {
            best = Some(cand);
        }
    }
    best.ok_or(QpError::NoFeasibleSubset)
}
