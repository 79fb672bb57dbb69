//! Experiment files and result emission.
//!
//! The file format is flat `key = value` text. `#` starts a comment and
//! lists are comma separated:
//!
//! ```text
//! mode = ber_sweep
//! Nt = 8
//! K = 8
//! order = 16
//! snr_db = 20, 25, 30
//! trials = 20000
//! seed = 42
//! schemes = ZF, RZF, CI-Iterative
//! ```

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::baselines::Scheme;
use crate::qp::DEFAULT_ITER_MAX;
use crate::sim::{BerResult, SimConfig, StatsConfig, StatsPoint, VerifyPoint};

/// Build identifier embedded in every output file.
pub const VERSION: &str = env!("CISP_VERSION");

pub const BER_HEADER: &str = "scheme,snr_db,ber,stderr,trials,mean_iterations,feasibility";
pub const STATS_HEADER: &str =
    "k,nt,order,trials,feasibility,mean_iterations,stderr_iterations,max_iterations,primal_completions";
pub const VERIFY_HEADER: &str = "k,nt,order,slots,solved,max_interference,max_power_error,max_inner_spread,\
min_outer_margin,max_slackness,max_dual_sum_error,max_oracle_gap,failures";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BerSweep,
    Feasibility,
    Iterations,
    Verify,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::BerSweep => "ber_sweep",
            Mode::Feasibility => "feasibility",
            Mode::Iterations => "iterations",
            Mode::Verify => "verify",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "ber_sweep" => Ok(Mode::BerSweep),
            "feasibility" => Ok(Mode::Feasibility),
            "iterations" => Ok(Mode::Iterations),
            "verify" => Ok(Mode::Verify),
            other => Err(format!("unknown mode `{other}` (ber_sweep, feasibility, iterations, verify)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (csv, json)")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: key `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("missing required key `mode`")]
    MissingMode,
    #[error("missing required key `{key}` for mode {mode}")]
    Missing { key: String, mode: Mode },
    #[error("line {line}: key `{key}` is not used by mode {mode}")]
    NotApplicable { line: usize, key: String, mode: Mode },
    #[error("key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub nt: Vec<usize>,
    pub k: Vec<usize>,
    pub order: usize,
    pub p0: f64,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub schemes: Vec<Scheme>,
    pub channel_reuse: usize,
    pub iter_max: usize,
    pub output: Option<PathBuf>,
    pub format: Format,
}

const KEYS: [&str; 13] = [
    "mode",
    "Nt",
    "K",
    "order",
    "p0",
    "snr_db",
    "trials",
    "seed",
    "schemes",
    "channel_reuse",
    "iter_max",
    "output",
    "format",
];

fn applies(key: &str, mode: Mode) -> bool {
    match key {
        "snr_db" | "schemes" | "channel_reuse" => mode == Mode::BerSweep,
        _ => true,
    }
}

fn required(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::BerSweep => &["Nt", "K", "order", "snr_db", "trials", "seed", "schemes"],
        _ => &["Nt", "K", "order", "trials", "seed"],
    }
}

struct Entry<'a> {
    line: usize,
    value: &'a str,
}

fn value_err(line: usize, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

fn scalar<T: FromStr>(key: &str, e: &Entry<'_>, what: &str) -> Result<T, ConfigError> {
    e.value
        .trim()
        .parse()
        .map_err(|_| value_err(e.line, key, format!("expected {what}, got `{}`", e.value.trim())))
}

fn list<T: FromStr>(key: &str, e: &Entry<'_>, what: &str) -> Result<Vec<T>, ConfigError> {
    let items: Vec<&str> = e.value.split(',').map(str::trim).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err(value_err(e.line, key, "empty list item"));
    }
    items
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| value_err(e.line, key, format!("expected {what}, got `{s}`")))
        })
        .collect()
}

/// Values that take precedence over the config file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
}

/// Parses a config; `mode` overrides the file's `mode` key.
pub fn parse_config_with_mode(text: &str, mode: Option<Mode>) -> Result<ExperimentSpec, ConfigError> {
    parse_config_with(text, Overrides { mode, seed: None })
}

pub fn parse_config_with(text: &str, overrides: Overrides) -> Result<ExperimentSpec, ConfigError> {
    let mode = overrides.mode;
    let mut entries: Vec<(&str, Entry<'_>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            });
        };
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if entries.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        if value.trim().is_empty() {
            return Err(value_err(line, key, "empty value"));
        }
        entries.push((key, Entry { line, value }));
    }
    let get = |key: &str| entries.iter().find(|(k, _)| *k == key).map(|(_, e)| e);

    let mode = match (mode, get("mode")) {
        (Some(m), _) => m,
        (None, Some(e)) => e.value.parse().map_err(|m: String| value_err(e.line, "mode", m))?,
        (None, None) => return Err(ConfigError::MissingMode),
    };
    for (key, e) in &entries {
        if !applies(key, mode) {
            return Err(ConfigError::NotApplicable {
                line: e.line,
                key: key.to_string(),
                mode,
            });
        }
    }
    for key in required(mode) {
        if get(key).is_none() && !(*key == "seed" && overrides.seed.is_some()) {
            return Err(ConfigError::Missing {
                key: key.to_string(),
                mode,
            });
        }
    }

    let nt: Vec<usize> = list("Nt", get("Nt").unwrap(), "a positive integer")?;
    let k: Vec<usize> = list("K", get("K").unwrap(), "a positive integer")?;
    let order = scalar("order", get("order").unwrap(), "4, 16 or 64")?;
    let trials = scalar("trials", get("trials").unwrap(), "a positive integer")?;
    let seed = match (overrides.seed, get("seed")) {
        (Some(seed), _) => seed,
        (None, e) => scalar("seed", e.unwrap(), "an unsigned 64-bit integer")?,
    };
    let p0 = get("p0").map(|e| scalar("p0", e, "a number")).transpose()?.unwrap_or(1.0);
    let snr_db = get("snr_db").map(|e| list("snr_db", e, "a number")).transpose()?.unwrap_or_default();
    let schemes = get("schemes").map(|e| list("schemes", e, "a scheme name")).transpose()?.unwrap_or_default();
    let channel_reuse = get("channel_reuse")
        .map(|e| scalar("channel_reuse", e, "a positive integer"))
        .transpose()?
        .unwrap_or(1);
    let iter_max = get("iter_max")
        .map(|e| scalar("iter_max", e, "a positive integer"))
        .transpose()?
        .unwrap_or(DEFAULT_ITER_MAX);
    let output = get("output").map(|e| PathBuf::from(e.value.trim()));
    let format = match get("format") {
        Some(e) => e.value.parse().map_err(|m: String| value_err(e.line, "format", m))?,
        None => Format::Csv,
    };

    let spec = ExperimentSpec {
        mode,
        nt,
        k,
        order,
        p0,
        snr_db,
        trials,
        seed,
        schemes,
        channel_reuse,
        iter_max,
        output,
        format,
    };
    spec.validate().map_err(|err| match err {
        ConfigError::Invalid { key, message } => match get(&key) {
            Some(e) => ConfigError::Value {
                line: e.line,
                key,
                message,
            },
            None => ConfigError::Invalid { key, message },
        },
        other => other,
    })?;
    Ok(spec)
}

pub fn parse_config(text: &str) -> Result<ExperimentSpec, ConfigError> {
    parse_config_with_mode(text, None)
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentSpec {
    fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| {
            Err(ConfigError::Invalid {
                key: key.to_string(),
                message,
            })
        };
        if self.nt.contains(&0) {
            return invalid("Nt", "must be at least 1".into());
        }
        if self.k.contains(&0) {
            return invalid("K", "must be at least 1".into());
        }
        if ![4, 16, 64].contains(&self.order) {
            return invalid("order", format!("expected 4, 16 or 64, got {}", self.order));
        }
        if self.trials == 0 {
            return invalid("trials", "must be at least 1".into());
        }
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return invalid("p0", format!("must be positive, got {}", self.p0));
        }
        if self.channel_reuse == 0 {
            return invalid("channel_reuse", "must be at least 1".into());
        }
        if self.iter_max == 0 {
            return invalid("iter_max", "must be at least 1".into());
        }
        if let Some(x) = self.snr_db.iter().find(|x| !x.is_finite()) {
            return invalid("snr_db", format!("{x} is not finite"));
        }
        match self.mode {
            Mode::BerSweep => {
                if self.nt.len() != 1 {
                    return invalid("Nt", "ber_sweep takes a single value".into());
                }
                if self.k.len() != 1 {
                    return invalid("K", "ber_sweep takes a single value".into());
                }
                if let Err(e) = self.sim_config().validate() {
                    let key = if self.schemes.is_empty() { "schemes" } else { "schemes" };
                    return invalid(key, e.to_string());
                }
            }
            _ => {
                if self.nt.len() != 1 && self.k.len() != 1 && self.nt.len() != self.k.len() {
                    return invalid("K", format!("{} values do not pair with {} Nt values", self.k.len(), self.nt.len()));
                }
            }
        }
        Ok(())
    }

    /// Simulation settings for `ber_sweep`.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            nt: self.nt[0],
            k: self.k[0],
            order: self.order,
            p0: self.p0,
            snr_db: self.snr_db.clone(),
            trials: self.trials,
            seed: self.seed,
            schemes: self.schemes.clone(),
            channel_reuse: self.channel_reuse,
            iter_max: self.iter_max,
        }
    }

    /// `(K, Nt)` pairs, broadcasting a single value against a list.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        let n = self.nt.len().max(self.k.len());
        (0..n)
            .map(|i| {
                let k = self.k[if self.k.len() == 1 { 0 } else { i }];
                let nt = self.nt[if self.nt.len() == 1 { 0 } else { i }];
                (k, nt)
            })
            .collect()
    }

    pub fn stats_config(&self) -> StatsConfig {
        StatsConfig {
            sizes: self.sizes(),
            order: self.order,
            p0: self.p0,
            trials: self.trials,
            seed: self.seed,
            iter_max: self.iter_max,
        }
    }

    /// Canonical text form; parsing it gives back `self`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        put("Nt", join(&self.nt));
        put("K", join(&self.k));
        put("order", self.order.to_string());
        put("p0", self.p0.to_string());
        if self.mode == Mode::BerSweep {
            put("snr_db", join(&self.snr_db));
            put("schemes", join(&self.schemes));
            put("channel_reuse", self.channel_reuse.to_string());
        }
        put("trials", self.trials.to_string());
        put("seed", self.seed.to_string());
        put("iter_max", self.iter_max.to_string());
        if let Some(p) = &self.output {
            put("output", p.display().to_string());
        }
        put("format", self.format.to_string());
        out
    }
}

/// Outcome of any experiment mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Results {
    Ber(BerResult),
    Stats(Vec<StatsPoint>),
    Verify(Vec<VerifyPoint>),
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn provenance(spec: &ExperimentSpec, out: &mut String) {
    let _ = writeln!(out, "# version: {VERSION}");
    let spec = ExperimentSpec {
        output: None,
        ..spec.clone()
    };
    for line in spec.serialize().lines() {
        let _ = writeln!(out, "# {line}");
    }
}

pub fn render_csv(results: &Results, spec: &ExperimentSpec) -> String {
    let mut out = String::new();
    provenance(spec, &mut out);
    match results {
        Results::Ber(r) => {
            out.push_str(BER_HEADER);
            out.push('\n');
            let mut rows: Vec<_> = r.points.iter().collect();
            rows.sort_by(|a, b| a.scheme.name().cmp(b.scheme.name()).then(a.snr_db.total_cmp(&b.snr_db)));
            for p in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    p.scheme,
                    p.snr_db,
                    p.ber,
                    p.stderr,
                    p.trials,
                    opt(p.mean_iterations),
                    opt(p.feasibility)
                );
            }
        }
        Results::Stats(points) => {
            out.push_str(STATS_HEADER);
            out.push('\n');
            for p in points {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    p.k,
                    p.nt,
                    p.order,
                    p.trials,
                    p.feasibility,
                    p.mean_iterations,
                    p.stderr_iterations,
                    p.max_iterations,
                    p.primal_completions
                );
            }
        }
        Results::Verify(points) => {
            out.push_str(VERIFY_HEADER);
            out.push('\n');
            for p in points {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
                    p.k,
                    p.nt,
                    p.order,
                    p.slots,
                    p.solved,
                    p.max_interference,
                    p.max_power_error,
                    p.max_inner_spread,
                    p.min_outer_margin,
                    p.max_slackness,
                    p.max_dual_sum_error,
                    p.max_oracle_gap.map(|g| format!("{g:e}")).unwrap_or_default(),
                    p.failures
                );
            }
        }
    }
    out
}

pub fn render_json(results: &Results, spec: &ExperimentSpec) -> String {
    let rows = match results {
        Results::Ber(r) => {
            let mut rows: Vec<_> = r.points.iter().collect();
            rows.sort_by(|a, b| a.scheme.name().cmp(b.scheme.name()).then(a.snr_db.total_cmp(&b.snr_db)));
            rows.iter()
                .map(|p| {
                    json!({
                        "scheme": p.scheme,
                        "snr_db": p.snr_db,
                        "ber": p.ber,
                        "stderr": p.stderr,
                        "trials": p.trials,
                        "mean_iterations": p.mean_iterations,
                        "feasibility": p.feasibility,
                        "bit_errors": p.bit_errors,
                        "bits": p.bits,
                        "fallbacks": p.fallbacks,
                    })
                })
                .collect::<Vec<_>>()
        }
        Results::Stats(points) => points.iter().map(|p| json!(p)).collect(),
        Results::Verify(points) => points.iter().map(|p| json!(p)).collect(),
    };
    let doc = json!({
        "version": VERSION,
        "mode": spec.mode,
        "seed": spec.seed,
        "spec": spec,
        "config_text": spec.serialize(),
        "results": rows,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("serializable");
    text.push('\n');
    text
}

#[derive(Debug, Error)]
#[error("cannot write {path}: {source}")]
pub struct EmitError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

/// Writes results to `path` in the experiment's output format.
pub fn emit_results(results: &Results, spec: &ExperimentSpec, path: &Path) -> Result<(), EmitError> {
    let text = match spec.format {
        Format::Csv => render_csv(results, spec),
        Format::Json => render_json(results, spec),
    };
    fs::write(path, text).map_err(|source| EmitError {
        path: path.to_path_buf(),
        source,
    })
}
