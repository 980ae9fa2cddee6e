mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "stressnet",
    version,
    about = "Water-stress classification from daily RGB and thermal plant images"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration (repro-table2).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory, overriding the configured one. For `simulate`, the
    /// dataset directory.
    #[arg(long, global = true, env = "STRESSNET_OUT")]
    out: Option<PathBuf>,
    /// Dataset root, overriding the configured one.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Global seed, overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(commands::SimulateArgs),
    /// Catalog a dataset and report missing files.
    Ingest(commands::IngestArgs),
    /// Train one model and write its checkpoint and loss log.
    Train(commands::TrainArgs),
    /// Score models on the test plants for every sequence length.
    Evaluate(commands::EvaluateArgs),
    /// Temperature-centroid baseline and its noise sweep.
    Baseline(commands::BaselineArgs),
    /// Re-render plots and a summary from existing report CSVs.
    Report,
}

/// Bad input from the user (exit 2) versus a failure while running (exit 1).
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<stressnet::Error> for Failure {
    fn from(e: stressnet::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match (&g.config, &g.preset) {
        (Some(path), _) => RunConfig::load(path).map_err(usage)?,
        (None, Some(name)) => RunConfig::preset(name).map_err(usage)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    if let Some(data) = &g.data {
        cfg.dataset.root = data.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(usage(anyhow::anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(anyhow::Error::from)?;
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(cfg, a, cli.global.out),
        Command::Ingest(a) => commands::ingest(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Baseline(a) => commands::baseline(cfg, a),
        Command::Report => commands::report(cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
