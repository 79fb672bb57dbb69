//! `cisp`: runs constructive-interference precoding experiments from a
//! config file and writes CSV or JSON results.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cisp_core::config::{
    emit_results, parse_config_with, render_csv, render_json, ExperimentSpec, Format, Mode, Overrides, Results,
};
use cisp_core::sim::{run_ber_sweep, run_feasibility_stats, run_solver_stats, run_verification, SimError};

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "cisp", version, about = "Constructive-interference precoding simulator")]
struct Args {
    /// Experiment file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's mode: ber_sweep, feasibility, iterations, verify.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when absent from both flag and config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
    /// Worker threads, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse()
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Slot { .. } | SimError::Redraws { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn load(args: &Args) -> Result<ExperimentSpec, Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let overrides = Overrides {
        mode: args.mode,
        seed: args.seed,
    };
    let mut spec =
        parse_config_with(&text, overrides).map_err(|e| Failure::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(out) = &args.out {
        spec.output = Some(out.clone());
    }
    if let Some(format) = args.format {
        spec.format = format;
    }
    Ok(spec)
}

fn execute(spec: &ExperimentSpec) -> Result<Results, Failure> {
    Ok(match spec.mode {
        Mode::BerSweep => Results::Ber(run_ber_sweep(&spec.sim_config())?),
        Mode::Feasibility => Results::Stats(run_feasibility_stats(&spec.stats_config())?),
        Mode::Iterations => Results::Stats(run_solver_stats(&spec.stats_config())?),
        Mode::Verify => Results::Verify(run_verification(&spec.stats_config())?),
    })
}

fn write(results: &Results, spec: &ExperimentSpec) -> Result<(), Failure> {
    match &spec.output {
        Some(path) => emit_results(results, spec, path).map_err(|e| Failure::Config(e.to_string())),
        None => {
            let text = match spec.format {
                Format::Csv => render_csv(results, spec),
                Format::Json => render_json(results, spec),
            };
            io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| Failure::Config(format!("cannot write output: {e}")))
        }
    }
}

fn run(args: &Args) -> Result<(), Failure> {
    let spec = load(args)?;
    if args.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build_global()
            .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
    }
    let results = execute(&spec)?;
    write(&results, &spec)?;
    if let Results::Verify(points) = &results {
        let failed: Vec<String> = points
            .iter()
            .filter(|p| p.failures > 0)
            .map(|p| format!("K={} Nt={}: {} of {} slots out of tolerance", p.k, p.nt, p.failures, p.slots))
            .collect();
        if !failed.is_empty() {
            return Err(Failure::Numerical(failed.join("; ")));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("cisp: config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("cisp: numerical failure: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
