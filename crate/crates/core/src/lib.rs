//! Constructive-interference symbol-level precoding for QAM downlinks.
//!
//! The crate covers the full chain from constellation mapping to Monte Carlo
//! bit-error-rate sweeps:
//!
//! * [`modem`]: square QAM, Gray mapping, component expansion, detection
//! * [`qp`]: the simplex-type dual QP and its solvers
//! * [`ci_core`] / [`ci_overload`]: CI precoders for `K ≤ Nt` and `K > Nt`
//! * [`baselines`]: ZF and RZF
//! * [`sim`]: seeded, optionally parallel Monte Carlo harness
//! * [`config`]: experiment files and result emission

pub mod baselines;
pub mod ci_core;
pub mod ci_overload;
pub mod config;
pub mod modem;
pub mod numerics;
pub mod qp;
pub mod sim;

pub use baselines::{Precoder, Scheme};
pub use numerics::{CMat, CVec, RMat, RVec, C64};

#[cfg(test)]
pub(crate) mod test_support {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use crate::modem::{build_expansion, make_square_qam, SymbolFrame};
    use crate::numerics::{CMat, CVec, RMat};

    pub fn random_channel(rng: &mut ChaCha8Rng, k: usize, nt: usize) -> CMat {
        crate::sim::draw_channel(k, nt, rng)
    }

    pub fn random_symbols(rng: &mut ChaCha8Rng, k: usize, order: usize) -> CVec {
        let c = make_square_qam(order).unwrap();
        CVec::from_fn(k, |_, _| c.points()[rng.random_range(0..order)])
    }

    pub fn random_frame(rng: &mut ChaCha8Rng, k: usize, order: usize) -> SymbolFrame {
        let c = make_square_qam(order).unwrap();
        let s = random_symbols(rng, k, order);
        build_expansion(s.as_slice(), &c).unwrap()
    }

    pub fn random_spd(rng: &mut ChaCha8Rng, m: usize, ridge: f64) -> RMat {
        let a = RMat::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let q = &a * a.transpose() + RMat::identity(m, m) * ridge;
        (&q + q.transpose()) * 0.5
    }

    pub fn random_orthonormal(rng: &mut ChaCha8Rng, m: usize, r: usize) -> RMat {
        let a = RMat::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0));
        a.qr().q()
    }

    pub fn relative_gap(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }
}
