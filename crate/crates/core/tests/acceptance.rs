//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cisp_core::baselines::zf_precode;
use cisp_core::ci_core::{build_geometry, solve_ci, QpSolver};
use cisp_core::ci_overload::{build_overload_geometry, solve_ci_overload};
use cisp_core::config::{parse_config, render_csv, ExperimentSpec, Results};
use cisp_core::modem::{build_expansion, make_square_qam, map_bits, Constellation, SymbolFrame};
use cisp_core::numerics::{cosine_distance, numeric_rank, RANK_TOL};
use cisp_core::sim::{
    draw_channel, run_ber_sweep, run_ber_sweep_with, run_feasibility_stats, run_solver_stats, run_verification,
    Execution, StatsConfig, StatsPoint,
};
use cisp_core::{CMat, Scheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_frame(rng: &mut ChaCha8Rng, k: usize, c: &Constellation) -> SymbolFrame {
    let bits: Vec<u8> = (0..k * c.bits_per_symbol()).map(|_| rng.random_range(0..2u8)).collect();
    build_expansion(&map_bits(&bits, c).unwrap(), c).unwrap()
}

/// Draws channels until the CI geometry is well defined.
fn usable_channel(rng: &mut ChaCha8Rng, k: usize, nt: usize, frame: &SymbolFrame) -> CMat {
    loop {
        let h = draw_channel(k, nt, rng);
        let ok = if k <= nt {
            build_geometry(&h, frame).is_ok()
        } else {
            build_overload_geometry(&h, frame).is_ok()
        };
        if ok {
            return h;
        }
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn kkt_certificates() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    let mut margin = f64::INFINITY;
    let mut failures = 0;
    let mut slots = 0;
    for order in [16, 64] {
        let cfg = StatsConfig {
            sizes: vec![(2, 2), (4, 4), (8, 8)],
            order,
            p0: 1.0,
            trials: 500,
            seed: 101,
            iter_max: 100,
        };
        for p in run_verification(&cfg).expect("verification run") {
            slots += p.slots;
            failures += p.slots - p.solved;
            worst[0] = worst[0].max(p.max_interference);
            worst[1] = worst[1].max(p.max_power_error);
            worst[2] = worst[2].max(p.max_inner_spread);
            worst[3] = worst[3].max(p.max_dual_sum_error);
            margin = margin.min(p.min_outer_margin);
        }
    }
    let elapsed = start.elapsed();
    let finite = worst.iter().all(|x| x.is_finite()) && !margin.is_nan();
    let pass = finite
        && failures == 0
        && worst[0] <= 1e-8
        && worst[1] <= 1e-8
        && worst[2] <= 1e-8
        && margin >= -1e-9
        && worst[3] <= 1e-10
        && within(elapsed, 60);
    outcome(
        pass,
        format!(
            "{slots} slots: interference {:.1e} (≤1e-8), power {:.1e} (≤1e-8), inner spread {:.1e} (≤1e-8), \
             outer margin {:.1e} (≥-1e-9), dual sum {:.1e} (≤1e-10), unsolved {failures}, {:.1?} (≤60s)",
            worst[0], worst[1], worst[2], margin, worst[3], elapsed
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let sizes = [(2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (3, 2), (4, 3)];
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    let mut instances = 0;
    let mut first: Option<String> = None;
    for i in 0..350 {
        let (k, nt) = sizes[i % sizes.len()];
        let c = make_square_qam([16, 64][i % 2]).unwrap();
        let frame = random_frame(&mut rng, k, &c);
        let h = usable_channel(&mut rng, k, nt, &frame);
        let (t, t_oracle) = if k <= nt {
            let a = solve_ci(&h, &frame, 1.0, QpSolver::ACTIVE_SET);
            let o = solve_ci(&h, &frame, 1.0, QpSolver::Oracle);
            match (a, o) {
                (Ok((a, _)), Ok((o, _))) => (a.t, o.t),
                (a, o) => {
                    first.get_or_insert(format!("K={k} Nt={nt}: {:?} / {:?}", a.err(), o.err()));
                    (f64::NAN, f64::NAN)
                }
            }
        } else {
            let a = solve_ci_overload(&h, &frame, 1.0, QpSolver::ACTIVE_SET);
            let o = solve_ci_overload(&h, &frame, 1.0, QpSolver::Oracle);
            match (a, o) {
                (Ok((a, _)), Ok((o, _))) => (a.t, o.t),
                (a, o) => {
                    first.get_or_insert(format!("K={k} Nt={nt}: {:?} / {:?}", a.err(), o.err()));
                    (f64::NAN, f64::NAN)
                }
            }
        };
        instances += 1;
        let gap = if t == t_oracle {
            0.0
        } else {
            (t - t_oracle).abs() / t.abs().max(t_oracle.abs())
        };
        if !(gap <= 1e-8) {
            bad += 1;
            first.get_or_insert(format!("K={k} Nt={nt}: t {t} vs oracle {t_oracle}"));
        }
        if gap.is_finite() {
            worst = worst.max(gap);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        bad == 0 && within(elapsed, 120),
        format!(
            "{instances} instances: worst relative gap {worst:.1e} (≤1e-8), mismatches {bad}{}, {elapsed:.1?} (≤120s)",
            first.map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn zf_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let c = make_square_qam(16).unwrap();
    let (mut eligible, mut bad) = (0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let frame = random_frame(&mut rng, 4, &c);
        let h = usable_channel(&mut rng, 4, 4, &frame);
        let geo = build_geometry(&h, &frame).unwrap();
        let n = geo.perm.outer_count();
        // a = Q⁻¹𝟙 with Q⁻¹ = Ṽ
        let a = geo.v_tilde.column_sum();
        if (0..n).any(|i| a[i] < 0.0) {
            continue;
        }
        eligible += 1;
        let (sol, ci) = solve_ci(&h, &frame, 1.0, QpSolver::ACTIVE_SET).unwrap();
        let zf = zf_precode(&h, &frame.s, 1.0).unwrap();
        let d = cosine_distance(&ci.x, &zf.x);
        worst = worst.max(d);
        if !(d <= 1e-10) || sol.iterations != 0 {
            bad += 1;
        }
    }
    outcome(
        bad == 0 && eligible > 0,
        format!("{eligible} of 1000 slots eligible: worst cosine distance {worst:.1e} (≤1e-10), violations {bad}"),
    )
}

fn ber_spec(seed: u64) -> ExperimentSpec {
    parse_config(&format!(
        "mode = ber_sweep\nNt = 8\nK = 8\norder = 16\nsnr_db = 30, 35, 36\ntrials = 20000\nseed = {seed}\n\
         schemes = ZF, RZF, CI-Iterative, CI-CF\n"
    ))
    .unwrap()
}

fn ber_criteria(spec: &ExperimentSpec) -> (Outcome, Outcome, String) {
    let start = Instant::now();
    let r = run_ber_sweep(&spec.sim_config()).expect("BER sweep");
    let elapsed = start.elapsed();
    let ber = |s: Scheme, snr: f64| r.ber(s, snr).unwrap();
    let ci30 = ber(Scheme::CiIterative, 30.0);
    let zf36 = ber(Scheme::Zf, 36.0);
    let ci35 = ber(Scheme::CiIterative, 35.0);
    let rzf35 = ber(Scheme::Rzf, 35.0);
    let cf35 = ber(Scheme::CiClosedForm, 35.0);
    let zf35 = ber(Scheme::Zf, 35.0);
    let gain = outcome(
        ci30 <= zf36 && ci35 < rzf35 && within(elapsed, 600),
        format!(
            "CI@30dB {ci30:.3e} ≤ ZF@36dB {zf36:.3e}: {}; CI@35dB {ci35:.3e} < RZF@35dB {rzf35:.3e}: {}; {elapsed:.1?} (≤600s)",
            ci30 <= zf36,
            ci35 < rzf35
        ),
    );
    let ordering = outcome(
        ci35 <= cf35 && cf35 <= zf35,
        format!("at 35dB CI {ci35:.3e} ≤ CI-CF {cf35:.3e} ≤ ZF {zf35:.3e}"),
    );
    (gain, ordering, render_csv(&Results::Ber(r), spec))
}

fn feasibility_spec() -> ExperimentSpec {
    parse_config(
        "mode = feasibility\nNt = 12, 6, 6, 6, 6\nK = 13, 7, 8, 9, 10\norder = 16\ntrials = 2000\nseed = 606\n",
    )
    .unwrap()
}

fn overload_feasibility(spec: &ExperimentSpec) -> (Outcome, String) {
    let start = Instant::now();
    let points = run_feasibility_stats(&spec.stats_config()).expect("feasibility run");
    let elapsed = start.elapsed();
    let f: Vec<f64> = points.iter().map(|p| p.feasibility).collect();
    let decreasing = f[1..].windows(2).all(|w| w[1] < w[0]);
    let pass = f[0] >= 0.95 && f[1] > 0.2 && f[1] < 0.99 && decreasing && within(elapsed, 300);
    let detail = format!(
        "(13,12) {:.4} (≥0.95); (7,6) {:.4} in (0.2,0.99); Nt=6, K=7..10 {:?} strictly decreasing: {decreasing}; {elapsed:.1?} (≤300s)",
        f[0],
        f[1],
        &f[1..]
    );
    (outcome(pass, detail), render_csv(&Results::Stats(points), spec))
}

fn rank_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let c = make_square_qam(16).unwrap();
    let mut violations = 0;
    let mut channels = 0;
    for (k, nt) in [(3, 2), (9, 8), (13, 12)] {
        for _ in 0..1000 {
            let frame = random_frame(&mut rng, k, &c);
            let h = draw_channel(k, nt, &mut rng);
            channels += 1;
            match build_overload_geometry(&h, &frame) {
                Ok(g) if numeric_rank(&g.p_e, RANK_TOL) == 2 * (k - nt) => {}
                _ => violations += 1,
            }
        }
    }
    outcome(violations == 0, format!("{channels} channels, violations {violations} (must be 0)"))
}

fn iteration_trends() -> Outcome {
    let sizes: Vec<(usize, usize)> = (4..=12).map(|k| (k, k)).collect();
    let run = |order| {
        run_solver_stats(&StatsConfig {
            sizes: sizes.clone(),
            order,
            p0: 1.0,
            trials: 2000,
            seed: 808,
            iter_max: 100,
        })
        .expect("iteration stats")
    };
    let q16 = run(16);
    let q64 = run(64);
    let inversions = |pts: &[StatsPoint]| {
        let mut count = 0;
        let mut large = 0;
        for w in pts.windows(2) {
            if w[1].mean_iterations < w[0].mean_iterations {
                count += 1;
                let se = w[0].stderr_iterations.hypot(w[1].stderr_iterations);
                if w[0].mean_iterations - w[1].mean_iterations > se {
                    large += 1;
                }
            }
        }
        (count, large)
    };
    let (i16, l16) = inversions(&q16);
    let (i64_, l64) = inversions(&q64);
    let below = q16.iter().zip(&q64).all(|(a, b)| b.mean_iterations <= a.mean_iterations);
    let means = |pts: &[StatsPoint]| pts.iter().map(|p| format!("{:.2}", p.mean_iterations)).collect::<Vec<_>>().join(" ");
    outcome(
        i16 <= 1 && l16 == 0 && i64_ <= 1 && l64 == 0 && below,
        format!(
            "K=4..12 16QAM [{}] inversions {i16} (>1se: {l16}); 64QAM [{}] inversions {i64_} (>1se: {l64}); 64QAM ≤ 16QAM: {below}",
            means(&q16),
            means(&q64)
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "KKT certificate", kkt_certificates());
    report(2, "oracle equivalence", oracle_equivalence());
    report(3, "ZF reduction", zf_reduction());
    let spec = ber_spec(404);
    let (gain, ordering, ber_csv) = ber_criteria(&spec);
    report(4, "BER gain", gain);
    report(5, "closed-form ordering", ordering);
    let fspec = feasibility_spec();
    let (feas, feas_csv) = overload_feasibility(&fspec);
    report(6, "overload feasibility", feas);
    report(7, "rank law", rank_law());
    report(8, "iteration trends", iteration_trends());

    let again = render_csv(&Results::Ber(run_ber_sweep(&spec.sim_config()).unwrap()), &spec);
    let sequential = render_csv(
        &Results::Ber(run_ber_sweep_with(&spec.sim_config(), Execution::Sequential).unwrap()),
        &spec,
    );
    let (_, feas_again) = overload_feasibility(&fspec);
    let same = again == ber_csv && sequential == ber_csv && feas_again == feas_csv;
    report(
        9,
        "determinism",
        outcome(
            same,
            format!(
                "BER CSV ({} bytes) repeated and sequential identical: {}; feasibility CSV identical: {}",
                ber_csv.len(),
                again == ber_csv && sequential == ber_csv,
                feas_again == feas_csv
            ),
        ),
    );

    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
