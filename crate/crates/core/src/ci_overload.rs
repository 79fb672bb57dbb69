//! Constructive-interference precoding with more users than antennas.
//!
//! The channel Gram matrix is rank deficient, so the received scalings must
//! lie in the null space of a consistency matrix. The search is restricted
//! to that null space and the dual problem is solved with the pseudo-inverse
//! machinery of [`crate::qp`].

use crate::baselines::{rank_one_precoder, Precoder};
use crate::ci_core::{check_inputs, expand_gram, CiError, Permutation, QpSolver};
use crate::modem::{Component, SymbolFrame};
use crate::numerics::{
    inverse_symmetric, null_basis_with_floor, pseudo_inverse, stack_real_imag, CMat, NumericsError, RMat, RVec,
    RANK_TOL,
};
use crate::qp::{InverseMode, QpProblem, QpSolution};

pub const MAX_CONDITION: f64 = 1e12;

/// Relative tolerance on the equality of inner scalings.
pub const INNER_EQUALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct OverloadGeometry {
    /// `[HHᴴ(HHᴴ)⁺ − I] U diag(s_E)`
    pub p: CMat,
    /// `[Re P; Im P]`
    pub p_e: RMat,
    /// Orthonormal null-space basis of `P_E`.
    pub d: RMat,
    pub x: CMat,
    /// `Re X`
    pub y: RMat,
    pub perm: Permutation,
    pub gram_pinv: CMat,
    pub frame: SymbolFrame,
}

/// Builds the null-space geometry. Any `K` is accepted; with `K ≤ Nt` the
/// consistency matrix vanishes and `D` spans everything.
fn geometry(h: &CMat, frame: &SymbolFrame) -> Result<OverloadGeometry, CiError> {
    let (k, nt) = check_inputs(h, frame)?;
    let gram = h * h.adjoint();
    let gram_pinv = pseudo_inverse(&gram);
    let proj = &gram * &gram_pinv - CMat::identity(k, k);
    let s_e = &frame.s_e;
    let p = CMat::from_fn(k, 2 * k, |r, c| proj[(r, c / 2)] * s_e[c]);
    let p_e = stack_real_imag(&p);
    let floor = s_e.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let d = null_basis_with_floor(&p_e, RANK_TOL, floor);
    let expected = 2 * k.min(nt);
    if d.ncols() != expected {
        return Err(CiError::RankAnomaly {
            expected,
            found: d.ncols(),
        });
    }
    let dc = crate::numerics::to_complex(&d);
    let x = dc.transpose() * expand_gram(&gram_pinv, s_e) * &dc;
    let y = x.map(|z| z.re);
    let y = (&y + y.transpose()) * 0.5;
    Ok(OverloadGeometry {
        p,
        p_e,
        d,
        x,
        y,
        perm: Permutation::from_mask(&frame.mask),
        gram_pinv,
        frame: frame.clone(),
    })
}

pub fn build_overload_geometry(h: &CMat, frame: &SymbolFrame) -> Result<OverloadGeometry, CiError> {
    let (k, nt) = h.shape();
    if k <= nt {
        return Err(CiError::NotOverloaded { k, nt });
    }
    geometry(h, frame)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverloadSolution {
    /// Null-space weights.
    pub beta: RVec,
    /// `D β`, per component of `s_E`.
    pub omega: RVec,
    /// Smallest scaling over all components.
    pub t: f64,
    pub feasible: bool,
    pub u: RVec,
    pub delta0: f64,
    pub iterations: usize,
    pub completed_by_primal: bool,
    pub qp: QpSolution,
}

/// Scalings are usable when all are strictly positive and the inner ones
/// agree.
pub fn check_feasibility(omega: &RVec, frame: &SymbolFrame) -> bool {
    if omega.len() != frame.mask.len() || omega.is_empty() || !(omega.min() > 0.0) {
        return false;
    }
    let inner: Vec<f64> = omega
        .iter()
        .zip(&frame.mask)
        .filter(|(_, &m)| m == Component::Inner)
        .map(|(&w, _)| w)
        .collect();
    if inner.is_empty() {
        return true;
    }
    let lo = inner.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = inner.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= INNER_EQUALITY_TOL * hi.abs()
}

/// Solves through the null-space formulation regardless of the regime.
///
/// The precoder is `None` when the optimal dual objective vanishes, in which
/// case no scaling with a positive common value exists.
pub fn solve_null_space(
    h: &CMat,
    frame: &SymbolFrame,
    p0: f64,
    solver: QpSolver,
) -> Result<(OverloadSolution, Option<Precoder>), CiError> {
    if !(p0 > 0.0) {
        return Err(CiError::Power(p0));
    }
    let geo = geometry(h, frame)?;
    let (y_inv, _) = inverse_symmetric(&geo.y, MAX_CONDITION).map_err(|e| match e {
        NumericsError::Singular { condition } => CiError::IllConditioned(condition),
        _ => CiError::IllConditioned(f64::INFINITY),
    })?;
    let b = geo.perm.apply_rows(&geo.d);
    let q = &b * &y_inv * b.transpose();
    let q = (&q + q.transpose()) * 0.5;
    let q_pinv = &b * &geo.y * b.transpose();
    let problem = QpProblem::new(q, geo.perm.outer_count(), InverseMode::Pseudo)?.with_inverse(q_pinv);
    let qp = solver.solve(&problem)?;
    let objective = problem.objective(&qp.u);
    let scale = problem.q().amax() * qp.u.norm_squared();
    let m = frame.mask.len();
    if !(objective > 1e-12 * scale) {
        let sol = OverloadSolution {
            beta: RVec::zeros(geo.d.ncols()),
            omega: RVec::zeros(m),
            t: 0.0,
            feasible: false,
            u: qp.u.clone(),
            delta0: 0.0,
            iterations: qp.iterations,
            completed_by_primal: qp.completed_by_primal,
            qp,
        };
        return Ok((sol, None));
    }
    let delta0 = (objective / (4.0 * p0)).sqrt();
    let beta = &y_inv * (b.transpose() * &qp.u) / (2.0 * delta0);
    let omega = &geo.d * &beta;
    let t = omega.min();
    let target = frame.scaled_symbols(omega.as_slice());
    let x = h.adjoint() * (&geo.gram_pinv * target);
    let precoder = Precoder {
        w: rank_one_precoder(&x, &frame.s),
        x,
        rx_scale: t,
        label: solver.scheme(),
    };
    let sol = OverloadSolution {
        feasible: check_feasibility(&omega, frame),
        beta,
        omega,
        t,
        u: qp.u.clone(),
        delta0,
        iterations: qp.iterations,
        completed_by_primal: qp.completed_by_primal,
        qp,
    };
    Ok((sol, Some(precoder)))
}

pub fn solve_ci_overload(
    h: &CMat,
    frame: &SymbolFrame,
    p0: f64,
    solver: QpSolver,
) -> Result<(OverloadSolution, Option<Precoder>), CiError> {
    let (k, nt) = h.shape();
    if k <= nt {
        return Err(CiError::NotOverloaded { k, nt });
    }
    solve_null_space(h, frame, p0, solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ci_core::solve_ci;
    use crate::modem::{build_expansion, make_square_qam, Component::*};
    use crate::numerics::{numeric_rank, C64};
    use crate::test_support::{random_channel, random_frame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometry_rank_and_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let h = random_channel(&mut rng, 3, 2);
            let frame = random_frame(&mut rng, 3, 16);
            let g = build_overload_geometry(&h, &frame).unwrap();
            assert_eq!(numeric_rank(&g.p_e, RANK_TOL), 2);
            assert_eq!(g.d.ncols(), 4);
            assert!((&g.p_e * &g.d).norm() <= 1e-8);
            assert!((g.d.transpose() * &g.d - RMat::identity(4, 4)).amax() < 1e-10);
            assert!((&g.y - g.y.transpose()).amax() < 1e-10);
            for j in 0..4 {
                assert!((&g.p_e * g.d.column(j)).norm() <= 1e-9);
            }
        }
    }

    #[test]
    fn regime_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_channel(&mut rng, 2, 2);
        let frame = random_frame(&mut rng, 2, 16);
        assert!(matches!(
            solve_ci_overload(&h, &frame, 1.0, QpSolver::ACTIVE_SET),
            Err(CiError::NotOverloaded { k: 2, nt: 2 })
        ));
        assert!(matches!(build_overload_geometry(&h, &frame), Err(CiError::NotOverloaded { .. })));
    }

    #[test]
    fn feasibility_rule() {
        let c = make_square_qam(16).unwrap();
        let r10 = 10f64.sqrt();
        let frame = build_expansion(&[C64::new(3.0, 1.0) / r10, C64::new(1.0, 3.0) / r10], &c).unwrap();
        assert_eq!(frame.mask, vec![Outer, Inner, Inner, Outer]);
        let ok = RVec::from_column_slice(&[2.0, 1.0, 1.0, 1.5]);
        assert!(check_feasibility(&ok, &frame));
        let neg = RVec::from_column_slice(&[2.0, 1.0, 1.0, -0.1]);
        assert!(!check_feasibility(&neg, &frame));
        let zero_entry = RVec::from_column_slice(&[0.0, 1.0, 1.0, 1.5]);
        assert!(!check_feasibility(&zero_entry, &frame));
        assert!(!check_feasibility(&RVec::zeros(4), &frame));
        let unequal = RVec::from_column_slice(&[2.0, 1.0, 1.1, 1.5]);
        assert!(!check_feasibility(&unequal, &frame));
    }

    #[test]
    fn solutions_are_consistent_and_power_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut feasible = 0;
        for trial in 0..100 {
            let (k, nt) = [(3, 2), (4, 3), (7, 6)][trial % 3];
            let h = random_channel(&mut rng, k, nt);
            let frame = random_frame(&mut rng, k, 16);
            let (sol, pre) = solve_ci_overload(&h, &frame, 1.0, QpSolver::ACTIVE_SET).unwrap();
            let Some(pre) = pre else { continue };
            let g = build_overload_geometry(&h, &frame).unwrap();
            let target = frame.scaled_symbols(sol.omega.as_slice());
            let rx = &h * &pre.w * &frame.s;
            assert!((&rx - &target).camax() < 1e-8, "trial {trial}");
            assert!(((&pre.w * &frame.s).norm_squared() - 1.0).abs() < 1e-8);
            assert!((sol.beta.dot(&(&g.y * &sol.beta)) - 1.0).abs() < 1e-8);
            assert!((&g.p_e * &sol.omega).amax() < 1e-8);
            let consistent = &h * h.adjoint() * &g.gram_pinv * &target;
            assert!((consistent - &target).camax() < 1e-8);
            if sol.feasible {
                feasible += 1;
                let c = make_square_qam(16).unwrap();
                for kk in 0..k {
                    let (d, _) = crate::modem::detect_symbol(rx[kk], pre.rx_scale, &c).unwrap();
                    assert!((d - frame.s[kk]).norm() < 1e-9);
                }
            }
        }
        assert!(feasible > 30);
    }

    #[test]
    fn null_space_path_matches_direct_path_when_not_overloaded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..60 {
            let k = [2, 3, 4][trial % 3];
            let h = random_channel(&mut rng, k, k + trial % 2);
            let frame = random_frame(&mut rng, k, [16, 64][trial % 2]);
            let (direct, _) = solve_ci(&h, &frame, 1.0, QpSolver::ACTIVE_SET).unwrap();
            let (bridge, _) = solve_null_space(&h, &frame, 1.0, QpSolver::ACTIVE_SET).unwrap();
            assert!((direct.t - bridge.t).abs() <= 1e-6 * direct.t, "{} vs {}", direct.t, bridge.t);
        }
    }

    #[test]
    fn oracle_agrees_in_overload() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let h = random_channel(&mut rng, 4, 3);
            let frame = random_frame(&mut rng, 4, 16);
            let (a, _) = solve_ci_overload(&h, &frame, 1.0, QpSolver::ACTIVE_SET).unwrap();
            let (o, _) = solve_ci_overload(&h, &frame, 1.0, QpSolver::Oracle).unwrap();
            assert!((a.qp.objective - o.qp.objective).abs() <= 1e-8 * o.qp.objective.abs() + 1e-14);
        }
    }
}
