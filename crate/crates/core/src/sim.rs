//! Seeded Monte Carlo harness.
//!
//! Every random quantity comes from its own ChaCha8 stream keyed by
//! `(point, trial, kind)`, so results do not depend on scheduling and all
//! schemes see the same channels, bits and noise. Noise is drawn once per
//! trial at unit variance and scaled for each SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{rzf_precode, zf_precode, BaselineError, Precoder, Scheme};
use crate::ci_core::{certificate, solve_ci, Certificate, CiError, QpSolver};
use crate::ci_overload::solve_ci_overload;
use crate::modem::{build_expansion, make_square_qam, map_bits, Constellation, ModemError};
use crate::numerics::{CMat, CVec, C64};
use crate::qp::{QpError, DEFAULT_ITER_MAX, ORACLE_MAX_N};

/// Attempts at drawing a non-degenerate channel for one slot.
pub const MAX_REDRAWS: usize = 16;

const STREAM_CHANNEL: u64 = 0;
const STREAM_BITS: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{scheme} cannot run with K = {k} > Nt = {nt}")]
    Regime { scheme: Scheme, k: usize, nt: usize },
    #[error("trial {trial}, {scheme}: {source}")]
    Slot {
        trial: usize,
        scheme: Scheme,
        source: SlotError,
    },
    #[error("trial {trial}: no usable channel after {MAX_REDRAWS} draws ({last})")]
    Redraws { trial: usize, last: SlotError },
    #[error(transparent)]
    Modem(#[from] ModemError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SlotError {
    #[error(transparent)]
    Ci(#[from] CiError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl SlotError {
    /// Errors caused by a measure-zero channel realization.
    fn is_degenerate(&self) -> bool {
        match self {
            SlotError::Ci(e) => matches!(
                e,
                CiError::SingularChannel(_)
                    | CiError::IllConditioned(_)
                    | CiError::RankAnomaly { .. }
                    | CiError::ZeroObjective
                    | CiError::Qp(QpError::Degenerate(_) | QpError::ZeroPivot | QpError::SingularExact { .. })
            ),
            SlotError::Baseline(e) => matches!(e, BaselineError::Singular(_) | BaselineError::ZeroTransmit),
        }
    }
}

/// How trials are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub nt: usize,
    pub k: usize,
    pub order: usize,
    pub p0: f64,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub schemes: Vec<Scheme>,
    pub channel_reuse: usize,
    pub iter_max: usize,
}

impl SimConfig {
    pub fn new(nt: usize, k: usize, order: usize) -> Self {
        Self {
            nt,
            k,
            order,
            p0: 1.0,
            snr_db: vec![20.0],
            trials: 1000,
            seed: 0,
            schemes: vec![Scheme::Zf, Scheme::CiIterative],
            channel_reuse: 1,
            iter_max: DEFAULT_ITER_MAX,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.nt == 0 || self.k == 0 {
            return bad("Nt and K must be at least 1".into());
        }
        make_square_qam(self.order)?;
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return bad(format!("p0 must be positive, got {}", self.p0));
        }
        if self.snr_db.is_empty() {
            return bad("snr_db list is empty".into());
        }
        if let Some(x) = self.snr_db.iter().find(|x| !x.is_finite()) {
            return bad(format!("snr_db value {x} is not finite"));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.channel_reuse == 0 {
            return bad("channel_reuse must be at least 1".into());
        }
        if self.iter_max == 0 {
            return bad("iter_max must be at least 1".into());
        }
        if self.schemes.is_empty() {
            return bad("scheme list is empty".into());
        }
        for &scheme in &self.schemes {
            check_regime(scheme, self.k, self.nt)?;
        }
        Ok(())
    }

    fn constellation(&self) -> Constellation {
        make_square_qam(self.order).expect("validated order")
    }
}

fn check_regime(scheme: Scheme, k: usize, nt: usize) -> Result<(), SimError> {
    let ok = match scheme {
        Scheme::Zf => k <= nt,
        Scheme::CiOracle => 2 * k <= ORACLE_MAX_N,
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(SimError::Regime { scheme, k, nt })
    }
}

/// Noise variance for a per-antenna transmit SNR in dB.
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

fn stream(seed: u64, point: usize, index: usize, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((point as u64) << 48) | ((index as u64) << 2) | kind);
    rng
}

/// `K × Nt` matrix of i.i.d. unit-variance circular complex Gaussians.
pub fn draw_channel<R: Rng + ?Sized>(k: usize, nt: usize, rng: &mut R) -> CMat {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut h = CMat::zeros(k, nt);
    // row-major fill so the draw order follows user index
    for r in 0..k {
        for c in 0..nt {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            h[(r, c)] = C64::new(re * scale, im * scale);
        }
    }
    h
}

fn draw_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> CVec {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    CVec::from_fn(k, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * scale, im * scale)
    })
}

fn draw_bits<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

/// Per-slot solver diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDiagnostics {
    pub iterations: usize,
    /// CI scaling was valid and used.
    pub feasible: bool,
    /// RZF was transmitted instead of CI.
    pub fallback: bool,
    pub completed_by_primal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    pub decoded: Vec<u8>,
    pub diagnostics: SlotDiagnostics,
}

fn solver_for(scheme: Scheme, iter_max: usize) -> QpSolver {
    match scheme {
        Scheme::CiClosedForm => QpSolver::ClosedForm,
        Scheme::CiOracle => QpSolver::Oracle,
        _ => QpSolver::ActiveSet { iter_max },
    }
}

/// CI precoder for a slot; `None` asks the caller to fall back to RZF.
fn ci_precoder(
    h: &CMat,
    s: &[C64],
    c: &Constellation,
    scheme: Scheme,
    p0: f64,
    iter_max: usize,
) -> Result<(Option<Precoder>, SlotDiagnostics), SlotError> {
    let frame = build_expansion(s, c).map_err(|_| CiError::Length { k: h.nrows(), found: s.len() })?;
    let solver = solver_for(scheme, iter_max);
    let (k, nt) = h.shape();
    if k <= nt {
        let (sol, pre) = solve_ci(h, &frame, p0, solver)?;
        let diag = SlotDiagnostics {
            iterations: sol.iterations,
            feasible: true,
            fallback: false,
            completed_by_primal: sol.completed_by_primal,
        };
        Ok((Some(pre), diag))
    } else {
        let (sol, pre) = solve_ci_overload(h, &frame, p0, solver)?;
        let feasible = sol.feasible && pre.is_some();
        let diag = SlotDiagnostics {
            iterations: sol.iterations,
            feasible,
            fallback: !feasible,
            completed_by_primal: sol.completed_by_primal,
        };
        Ok((pre.filter(|_| feasible), diag))
    }
}

fn count_bit_errors(
    h: &CMat,
    pre: &Precoder,
    noise: &CVec,
    sigma: f64,
    c: &Constellation,
    bits: &[u8],
    scratch: &mut Vec<u8>,
) -> u64 {
    let rx = h * &pre.x + noise * C64::new(sigma, 0.0);
    scratch.clear();
    for r in rx.iter() {
        c.slice_bits(r / pre.rx_scale, scratch);
    }
    scratch.iter().zip(bits).filter(|(a, b)| a != b).count() as u64
}

/// Sends one slot of `bits` through `h` with the given scheme and detects
/// it at every receiver.
#[allow(clippy::too_many_arguments)]
pub fn transmit_slot<R: Rng + ?Sized>(
    h: &CMat,
    bits: &[u8],
    scheme: Scheme,
    c: &Constellation,
    p0: f64,
    noise_var: f64,
    iter_max: usize,
    rng: &mut R,
) -> Result<SlotOutcome, SimError> {
    let (k, nt) = h.shape();
    check_regime(scheme, k, nt)?;
    let s = map_bits(bits, c)?;
    if s.len() != k {
        return Err(SimError::Config(format!("{} symbols for {k} users", s.len())));
    }
    let slot = |e: SlotError| SimError::Slot { trial: 0, scheme, source: e };
    let sv = CVec::from_column_slice(&s);
    let (pre, diagnostics) = match scheme {
        Scheme::Zf => (zf_precode(h, &sv, p0).map_err(|e| slot(e.into()))?, SlotDiagnostics::default()),
        Scheme::Rzf => (
            rzf_precode(h, &sv, p0, noise_var).map_err(|e| slot(e.into()))?,
            SlotDiagnostics::default(),
        ),
        _ => {
            let (pre, diag) = ci_precoder(h, &s, c, scheme, p0, iter_max).map_err(slot)?;
            match pre {
                Some(p) => (p, diag),
                None => (rzf_precode(h, &sv, p0, noise_var).map_err(|e| slot(e.into()))?, diag),
            }
        }
    };
    let noise = draw_noise(k, rng);
    let mut decoded = Vec::with_capacity(bits.len());
    count_bit_errors(h, &pre, &noise, noise_var.sqrt(), c, bits, &mut decoded);
    Ok(SlotOutcome { decoded, diagnostics })
}

/// Runs `trials` independent evaluations and merges them.
fn fold_trials<A, F, Z, M>(trials: usize, exec: Execution, eval: F, zero: Z, merge: M) -> Result<A, SimError>
where
    A: Send,
    F: Fn(usize) -> Result<A, SimError> + Sync + Send,
    Z: Fn() -> A + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..trials).try_fold(zero(), |acc, i| Ok(merge(acc, eval(i)?))),
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..trials)
            .into_par_iter()
            .map(eval)
            .try_reduce(zero, |a, b| Ok(merge(a, b))),
    }
}

/// Integer tallies of one or more trials of a BER sweep.
#[derive(Debug, Clone, PartialEq)]
struct Tally {
    /// `[scheme][snr]`
    errors: Vec<Vec<u64>>,
    /// Sum over trials of the squared per-trial error count.
    errors_sq: Vec<Vec<u64>>,
    iterations: Vec<u64>,
    feasible: Vec<u64>,
    fallbacks: Vec<u64>,
    primal: Vec<u64>,
    redraws: u64,
}

impl Tally {
    fn zero(schemes: usize, snrs: usize) -> Self {
        Self {
            errors: vec![vec![0; snrs]; schemes],
            errors_sq: vec![vec![0; snrs]; schemes],
            iterations: vec![0; schemes],
            feasible: vec![0; schemes],
            fallbacks: vec![0; schemes],
            primal: vec![0; schemes],
            redraws: 0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.errors.iter_mut().zip(&other.errors).chain(self.errors_sq.iter_mut().zip(&other.errors_sq)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in [
            (&mut self.iterations, &other.iterations),
            (&mut self.feasible, &other.feasible),
            (&mut self.fallbacks, &other.fallbacks),
            (&mut self.primal, &other.primal),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.redraws += other.redraws;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub scheme: Scheme,
    pub snr_db: f64,
    pub bit_errors: u64,
    pub bits: u64,
    pub ber: f64,
    /// Standard error of `ber` from the spread of per-trial error counts.
    /// Slots sharing a channel block are treated as independent.
    pub stderr: f64,
    pub trials: usize,
    /// Mean solver iterations (CI schemes).
    pub mean_iterations: Option<f64>,
    /// Fraction of slots where the CI precoder was used (CI schemes).
    pub feasibility: Option<f64>,
    pub fallbacks: Option<u64>,
    pub primal_completions: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerResult {
    pub config: SimConfig,
    pub points: Vec<BerPoint>,
    pub redraws: u64,
}

impl BerResult {
    pub fn point(&self, scheme: Scheme, snr_db: f64) -> Option<&BerPoint> {
        self.points.iter().find(|p| p.scheme == scheme && p.snr_db == snr_db)
    }

    pub fn ber(&self, scheme: Scheme, snr_db: f64) -> Option<f64> {
        self.point(scheme, snr_db).map(|p| p.ber)
    }
}

pub fn run_ber_sweep(cfg: &SimConfig) -> Result<BerResult, SimError> {
    run_ber_sweep_with(cfg, Execution::default())
}

pub fn run_ber_sweep_with(cfg: &SimConfig, exec: Execution) -> Result<BerResult, SimError> {
    cfg.validate()?;
    let c = cfg.constellation();
    let sigmas: Vec<f64> = cfg.snr_db.iter().map(|&x| noise_variance(x).sqrt()).collect();
    let n_schemes = cfg.schemes.len();
    let n_snr = sigmas.len();
    let eval = |trial: usize| ber_trial(cfg, &c, &sigmas, trial);
    let tally = fold_trials(
        cfg.trials,
        exec,
        eval,
        || Tally::zero(n_schemes, n_snr),
        Tally::merge,
    )?;
    let bits = (cfg.trials * cfg.k * c.bits_per_symbol()) as u64;
    let mut points = Vec::with_capacity(n_schemes * n_snr);
    for (i, &scheme) in cfg.schemes.iter().enumerate() {
        for (j, &snr_db) in cfg.snr_db.iter().enumerate() {
            let bit_errors = tally.errors[i][j];
            let ber = bit_errors as f64 / bits as f64;
            let ci = scheme.is_ci();
            let per_trial = |x: u64| x as f64 / cfg.trials as f64;
            points.push(BerPoint {
                scheme,
                snr_db,
                bit_errors,
                bits,
                ber,
                stderr: trial_stderr(bit_errors, tally.errors_sq[i][j], cfg.trials, bits),
                trials: cfg.trials,
                mean_iterations: ci.then(|| per_trial(tally.iterations[i])),
                feasibility: ci.then(|| per_trial(tally.feasible[i])),
                fallbacks: ci.then_some(tally.fallbacks[i]),
                primal_completions: ci.then_some(tally.primal[i]),
            });
        }
    }
    Ok(BerResult {
        config: cfg.clone(),
        points,
        redraws: tally.redraws,
    })
}

fn trial_stderr(sum: u64, sum_sq: u64, trials: usize, bits: u64) -> f64 {
    if trials < 2 {
        return 0.0;
    }
    let n = trials as f64;
    let mean = sum as f64 / n;
    let var = ((sum_sq as f64 - n * mean * mean) / (n - 1.0)).max(0.0);
    (var * n).sqrt() / bits as f64
}

/// SNR-independent part of a scheme's transmission for one slot.
enum Plan {
    Fixed(Precoder),
    Rzf,
}

fn ber_trial(cfg: &SimConfig, c: &Constellation, sigmas: &[f64], trial: usize) -> Result<Tally, SimError> {
    let bits = draw_bits(cfg.k * c.bits_per_symbol(), &mut stream(cfg.seed, 0, trial, STREAM_BITS));
    let s = map_bits(&bits, c)?;
    let sv = CVec::from_column_slice(&s);
    let noise = draw_noise(cfg.k, &mut stream(cfg.seed, 0, trial, STREAM_NOISE));
    let mut channel_rng = stream(cfg.seed, 0, trial / cfg.channel_reuse, STREAM_CHANNEL);
    let mut tally = Tally::zero(cfg.schemes.len(), sigmas.len());

    // every slot of a block starts from the same channel draw
    let mut h = draw_channel(cfg.k, cfg.nt, &mut channel_rng);
    let mut attempt = 0;
    let (plans, diags) = loop {
        match plan_slot(cfg, c, &h, &s, &sv) {
            Ok(v) => break v,
            Err((_, e)) if e.is_degenerate() => {
                attempt += 1;
                if attempt >= MAX_REDRAWS {
                    return Err(SimError::Redraws { trial, last: e });
                }
                tally.redraws += 1;
                h = draw_channel(cfg.k, cfg.nt, &mut channel_rng);
            }
            Err((scheme, source)) => return Err(SimError::Slot { trial, scheme, source }),
        }
    };

    let mut scratch = Vec::with_capacity(bits.len());
    for (i, (plan, diag)) in plans.iter().zip(&diags).enumerate() {
        tally.iterations[i] = diag.iterations as u64;
        tally.feasible[i] = diag.feasible as u64;
        tally.fallbacks[i] = diag.fallback as u64;
        tally.primal[i] = diag.completed_by_primal as u64;
        for (j, &sigma) in sigmas.iter().enumerate() {
            let errors = match plan {
                Plan::Fixed(pre) => count_bit_errors(&h, pre, &noise, sigma, c, &bits, &mut scratch),
                Plan::Rzf => {
                    let pre = rzf_precode(&h, &sv, cfg.p0, sigma * sigma).map_err(|e| SimError::Slot {
                        trial,
                        scheme: cfg.schemes[i],
                        source: e.into(),
                    })?;
                    count_bit_errors(&h, &pre, &noise, sigma, c, &bits, &mut scratch)
                }
            };
            tally.errors[i][j] = errors;
            tally.errors_sq[i][j] = errors * errors;
        }
    }
    Ok(tally)
}

type SlotPlan = (Vec<Plan>, Vec<SlotDiagnostics>);

fn plan_slot(cfg: &SimConfig, c: &Constellation, h: &CMat, s: &[C64], sv: &CVec) -> Result<SlotPlan, (Scheme, SlotError)> {
    let mut plans = Vec::with_capacity(cfg.schemes.len());
    let mut diags = Vec::with_capacity(cfg.schemes.len());
    for &scheme in &cfg.schemes {
        let fail = |e: SlotError| (scheme, e);
        let (plan, diag) = match scheme {
            Scheme::Zf => (
                Plan::Fixed(zf_precode(h, sv, cfg.p0).map_err(|e| fail(e.into()))?),
                SlotDiagnostics::default(),
            ),
            Scheme::Rzf => (Plan::Rzf, SlotDiagnostics::default()),
            _ => {
                let (pre, diag) = ci_precoder(h, s, c, scheme, cfg.p0, cfg.iter_max).map_err(fail)?;
                (pre.map_or(Plan::Rzf, Plan::Fixed), diag)
            }
        };
        plans.push(plan);
        diags.push(diag);
    }
    Ok((plans, diags))
}

/// Configuration for solver statistics over a list of `(K, Nt)` sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub sizes: Vec<(usize, usize)>,
    pub order: usize,
    pub p0: f64,
    pub trials: usize,
    pub seed: u64,
    pub iter_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsPoint {
    pub k: usize,
    pub nt: usize,
    pub order: usize,
    pub trials: usize,
    pub feasibility: f64,
    pub mean_iterations: f64,
    /// Standard error of `mean_iterations`.
    pub stderr_iterations: f64,
    pub max_iterations: usize,
    pub primal_completions: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct StatsTally {
    feasible: u64,
    iterations: u64,
    iterations_sq: u64,
    max_iterations: usize,
    primal: u64,
}

impl StatsTally {
    fn merge(self, o: Self) -> Self {
        Self {
            feasible: self.feasible + o.feasible,
            iterations: self.iterations + o.iterations,
            iterations_sq: self.iterations_sq + o.iterations_sq,
            max_iterations: self.max_iterations.max(o.max_iterations),
            primal: self.primal + o.primal,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.sizes.is_empty() {
            return Err(SimError::Config("no (K, Nt) sizes given".into()));
        }
        if self.sizes.iter().any(|&(k, nt)| k == 0 || nt == 0) {
            return Err(SimError::Config("Nt and K must be at least 1".into()));
        }
        make_square_qam(self.order)?;
        if self.trials == 0 {
            return Err(SimError::Config("trials must be at least 1".into()));
        }
        if !(self.p0 > 0.0) {
            return Err(SimError::Config(format!("p0 must be positive, got {}", self.p0)));
        }
        if self.iter_max == 0 {
            return Err(SimError::Config("iter_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Feasibility fraction and iteration statistics of the active-set CI
/// solver, one point per size.
pub fn run_solver_stats(cfg: &StatsConfig) -> Result<Vec<StatsPoint>, SimError> {
    run_solver_stats_with(cfg, Execution::default())
}

pub fn run_solver_stats_with(cfg: &StatsConfig, exec: Execution) -> Result<Vec<StatsPoint>, SimError> {
    cfg.validate()?;
    let c = make_square_qam(cfg.order)?;
    let mut out = Vec::with_capacity(cfg.sizes.len());
    for (point, &(k, nt)) in cfg.sizes.iter().enumerate() {
        let eval = |trial: usize| stats_trial(cfg, &c, point, k, nt, trial);
        let t = fold_trials(cfg.trials, exec, eval, StatsTally::default, StatsTally::merge)?;
        let n = cfg.trials as f64;
        let mean = t.iterations as f64 / n;
        let var = if cfg.trials > 1 {
            ((t.iterations_sq as f64 - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        out.push(StatsPoint {
            k,
            nt,
            order: cfg.order,
            trials: cfg.trials,
            feasibility: t.feasible as f64 / n,
            mean_iterations: mean,
            stderr_iterations: (var / n).sqrt(),
            max_iterations: t.max_iterations,
            primal_completions: t.primal,
        });
    }
    Ok(out)
}

/// Alias of [`run_solver_stats`] for sweeps over overloaded sizes.
pub fn run_feasibility_stats(cfg: &StatsConfig) -> Result<Vec<StatsPoint>, SimError> {
    run_solver_stats(cfg)
}

fn stats_trial(
    cfg: &StatsConfig,
    c: &Constellation,
    point: usize,
    k: usize,
    nt: usize,
    trial: usize,
) -> Result<StatsTally, SimError> {
    let bits = draw_bits(k * c.bits_per_symbol(), &mut stream(cfg.seed, point, trial, STREAM_BITS));
    let s = map_bits(&bits, c)?;
    let mut channel_rng = stream(cfg.seed, point, trial, STREAM_CHANNEL);
    let mut last = None;
    for _ in 0..MAX_REDRAWS {
        let h = draw_channel(k, nt, &mut channel_rng);
        match ci_precoder(&h, &s, c, Scheme::CiIterative, cfg.p0, cfg.iter_max) {
            Ok((_, d)) => {
                let it = d.iterations as u64;
                return Ok(StatsTally {
                    feasible: d.feasible as u64,
                    iterations: it,
                    iterations_sq: it * it,
                    max_iterations: d.iterations,
                    primal: d.completed_by_primal as u64,
                });
            }
            Err(e) if e.is_degenerate() => last = Some(e),
            Err(source) => {
                return Err(SimError::Slot {
                    trial,
                    scheme: Scheme::CiIterative,
                    source,
                })
            }
        }
    }
    Err(SimError::Redraws {
        trial,
        last: last.expect("at least one draw"),
    })
}

/// Largest `2K` for which the verification suite runs the oracle.
pub const VERIFY_ORACLE_MAX_M: usize = 12;

/// Worst-case optimality residuals over the slots of one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyPoint {
    pub k: usize,
    pub nt: usize,
    pub order: usize,
    pub slots: usize,
    /// Slots with a usable CI scaling.
    pub solved: usize,
    pub max_interference: f64,
    pub max_power_error: f64,
    pub max_inner_spread: f64,
    pub min_outer_margin: f64,
    pub max_slackness: f64,
    pub max_dual_sum_error: f64,
    /// Largest relative gap between the active-set and oracle objectives.
    pub max_oracle_gap: Option<f64>,
    /// Slots violating any tolerance.
    pub failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct VerifyTally {
    solved: usize,
    interference: f64,
    power: f64,
    spread: f64,
    margin: f64,
    slackness: f64,
    dual_sum: f64,
    gap: f64,
    failures: usize,
}

impl Default for VerifyTally {
    fn default() -> Self {
        Self {
            solved: 0,
            interference: 0.0,
            power: 0.0,
            spread: 0.0,
            margin: f64::INFINITY,
            slackness: 0.0,
            dual_sum: 0.0,
            gap: 0.0,
            failures: 0,
        }
    }
}

impl VerifyTally {
    fn merge(self, o: Self) -> Self {
        Self {
            solved: self.solved + o.solved,
            interference: self.interference.max(o.interference),
            power: self.power.max(o.power),
            spread: self.spread.max(o.spread),
            margin: self.margin.min(o.margin),
            slackness: self.slackness.max(o.slackness),
            dual_sum: self.dual_sum.max(o.dual_sum),
            gap: self.gap.max(o.gap),
            failures: self.failures + o.failures,
        }
    }
}

/// Checks the optimality certificate of the active-set CI solution on
/// random slots, and compares against the oracle on small sizes.
pub fn run_verification(cfg: &StatsConfig) -> Result<Vec<VerifyPoint>, SimError> {
    run_verification_with(cfg, Execution::default())
}

pub fn run_verification_with(cfg: &StatsConfig, exec: Execution) -> Result<Vec<VerifyPoint>, SimError> {
    cfg.validate()?;
    let c = make_square_qam(cfg.order)?;
    let mut out = Vec::with_capacity(cfg.sizes.len());
    for (point, &(k, nt)) in cfg.sizes.iter().enumerate() {
        let eval = |trial: usize| verify_trial(cfg, &c, point, k, nt, trial);
        let t = fold_trials(cfg.trials, exec, eval, VerifyTally::default, VerifyTally::merge)?;
        out.push(VerifyPoint {
            k,
            nt,
            order: cfg.order,
            slots: cfg.trials,
            solved: t.solved,
            max_interference: t.interference,
            max_power_error: t.power,
            max_inner_spread: t.spread,
            min_outer_margin: t.margin,
            max_slackness: t.slackness,
            max_dual_sum_error: t.dual_sum,
            max_oracle_gap: (2 * k <= VERIFY_ORACLE_MAX_M).then_some(t.gap),
            failures: t.failures,
        });
    }
    Ok(out)
}

fn verify_trial(
    cfg: &StatsConfig,
    c: &Constellation,
    point: usize,
    k: usize,
    nt: usize,
    trial: usize,
) -> Result<VerifyTally, SimError> {
    let bits = draw_bits(k * c.bits_per_symbol(), &mut stream(cfg.seed, point, trial, STREAM_BITS));
    let s = map_bits(&bits, c)?;
    let frame = build_expansion(&s, c)?;
    let mut channel_rng = stream(cfg.seed, point, trial, STREAM_CHANNEL);
    let solver = QpSolver::ActiveSet { iter_max: cfg.iter_max };
    let use_oracle = 2 * k <= VERIFY_ORACLE_MAX_M;
    let slot_err = |source: CiError| SimError::Slot {
        trial,
        scheme: Scheme::CiIterative,
        source: source.into(),
    };
    let mut last = None;
    for _ in 0..MAX_REDRAWS {
        let h = draw_channel(k, nt, &mut channel_rng);
        let attempt = if k <= nt {
            solve_ci(&h, &frame, cfg.p0, solver).and_then(|(sol, pre)| {
                let oracle = if use_oracle {
                    Some(solve_ci(&h, &frame, cfg.p0, QpSolver::Oracle)?.0.t)
                } else {
                    None
                };
                let cert = certificate(&h, &frame, &sol.omega, sol.t, &sol.u, &pre, cfg.p0);
                Ok((Some(cert), sol.t, oracle, true))
            })
        } else {
            solve_ci_overload(&h, &frame, cfg.p0, solver).and_then(|(sol, pre)| {
                let oracle = if use_oracle {
                    Some(solve_ci_overload(&h, &frame, cfg.p0, QpSolver::Oracle)?.0.t)
                } else {
                    None
                };
                let cert = pre.map(|p| certificate(&h, &frame, &sol.omega, sol.t, &sol.u, &p, cfg.p0));
                Ok((cert, sol.t, oracle, sol.feasible))
            })
        };
        match attempt {
            Ok((cert, t, oracle, feasible)) => return Ok(tally_certificate(cert, t, oracle, feasible)),
            Err(e) => {
                let e = SlotError::from(e);
                if !e.is_degenerate() {
                    let SlotError::Ci(e) = e else { unreachable!() };
                    return Err(slot_err(e));
                }
                last = Some(e);
            }
        }
    }
    Err(SimError::Redraws {
        trial,
        last: last.expect("at least one draw"),
    })
}

fn tally_certificate(cert: Option<Certificate>, t: f64, oracle: Option<f64>, feasible: bool) -> VerifyTally {
    let mut v = VerifyTally::default();
    if let Some(o) = oracle {
        let gap = (t - o).abs() / t.abs().max(o.abs()).max(f64::MIN_POSITIVE);
        v.gap = if t == o { 0.0 } else { gap };
    }
    let Some(cert) = cert else {
        v.failures = usize::from(v.gap > 1e-8);
        return v;
    };
    v.interference = cert.interference;
    v.power = cert.power;
    v.dual_sum = cert.dual_sum;
    let mut ok = cert.interference <= 1e-8 && cert.power <= 1e-8 && cert.dual_sum <= 1e-10 && v.gap <= 1e-8;
    if feasible {
        v.solved = 1;
        v.spread = cert.inner_spread;
        v.margin = cert.outer_margin;
        v.slackness = cert.slackness;
        ok &= cert.inner_spread <= 1e-8 && cert.outer_margin >= -1e-9 && cert.slackness <= 1e-8;
    }
    v.failures = usize::from(!ok);
    v
}
