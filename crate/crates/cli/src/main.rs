use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use pace_core::eg_solver::{equilibrium_utilities, hindsight_solution, EgError, DEFAULT_TOL};
use pace_core::harness::{
    generate_market, read_metrics_csv, run_experiment, summarize, write_aggregate_csv, write_outputs, ExperimentConfig,
    HarnessError, SyntheticMarket,
};
use pace_core::input_models::{sample_sequence, InputModel};
use pace_core::market::{ItemSequence, MarketInstance, ReferenceDistribution};
use pace_core::pace::DEFAULT_DELTA0;

#[derive(Parser)]
#[command(name = "pace", version, about = "Online fair allocation experiments with PACE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write metrics.csv, aggregate.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        paths: Option<usize>,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Solve the hindsight market of an instance and a realized item sequence.
    Solve {
        /// Market instance JSON.
        #[arg(long)]
        instance: PathBuf,
        /// JSON array of 0-based item indices.
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DELTA0)]
        delta0: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic low-rank-plus-noise market, normalized against the uniform distribution.
    GenMarket {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 10)]
        rank: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample an item sequence from an input model JSON.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a metrics CSV into mean and standard error per time point.
    Summarize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), HarnessError> {
    let io_err = |source| HarnessError::Io { context: "output".into(), source };
    match out {
        Some(p) => fs::write(p, bytes).map_err(io_err),
        None => io::stdout().write_all(bytes).map_err(io_err),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, HarnessError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run { config, seed, out, paths, threads } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            if let Some(p) = paths {
                cfg.paths = p;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
            let result = run_experiment(&cfg, threads)?;
            write_outputs(&dir, &cfg, &result)?;
            info!("wrote results to {}", dir.display());
            Ok(())
        }
        Command::Solve { instance, sequence, delta0, tol, out } => {
            let inst: MarketInstance = read_json(&instance)?;
            let items: Vec<usize> = read_json(&sequence)?;
            let seq = ItemSequence::new(items).map_err(|e| HarnessError::Config(e.to_string()))?;
            let solver_err = |source: EgError| HarnessError::Solver { context: "hindsight solve".into(), source };
            let sol = hindsight_solution(&inst, &seq, delta0, tol).and_then(|s| s.require_converged()).map_err(solver_err)?;
            let utilities = equilibrium_utilities(&sol, inst.n());
            let body = serde_json::json!({
                "beta": sol.beta_hat,
                "utilities": utilities,
                "objective": sol.objective,
                "residual": sol.residual,
                "iterations": sol.iterations,
            });
            emit(out.as_deref(), &to_json(&body)?)
        }
        Command::GenMarket { n, m, rank, noise, seed, out } => {
            let spec = SyntheticMarket { n, m, rank, noise, seed };
            let inst = generate_market(&spec, &ReferenceDistribution::uniform(m))?;
            emit(out.as_deref(), &to_json(&inst)?)
        }
        Command::Sample { model, t, seed, out } => {
            let model: InputModel = read_json(&model)?;
            let seq = sample_sequence(&model, t, seed)
                .map_err(|source| HarnessError::Model { context: "sampling".into(), source })?;
            emit(out.as_deref(), &to_json(&seq.items())?)
        }
        Command::Summarize { input, out } => {
            let file = fs::File::open(&input).map_err(|e| HarnessError::Config(format!("{}: {e}", input.display())))?;
            let report = summarize(&read_metrics_csv(io::BufReader::new(file))?)?;
            let mut buf = Vec::new();
            write_aggregate_csv(&report, &mut buf)?;
            emit(out.as_deref(), &buf)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
