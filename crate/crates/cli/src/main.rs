use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use bridge_core::data::Split;
use bridge_core::Error;

mod commands;
mod config;
mod prepare;

use commands::SynthArgs;
use config::Config;

#[derive(Parser, Debug)]
#[command(name = "bridgecal", version, about = "Train and evaluate the multimodal recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Defaults to `<artifact_dir>/checkpoint.brck`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build or refresh the cached graphs and the split-integrity report.
    Prepare(Common),
    /// Train and keep the best-validation checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        args: WithCheckpoint,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Select the calibration setting on validation, then score test once.
    Sweep(WithCheckpoint),
    /// Train and evaluate each configured ablation variant.
    Ablate(Common),
    /// Band and stratified diagnostics for a checkpoint.
    Diagnose(WithCheckpoint),
    /// Write a planted-cluster dataset and a starter config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Use one feature matrix for both modalities.
        #[arg(long)]
        identical_modalities: bool,
    },
}

fn load(common: &Common) -> Result<Config> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(c) => commands::cmd_prepare(&load(&c)?),
        Command::Train(c) => commands::cmd_train(&load(&c)?),
        Command::Eval { args, split } => {
            let split = match split {
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            commands::cmd_eval(&load(&args.common)?, args.checkpoint.as_deref(), split)
        }
        Command::Sweep(a) => commands::cmd_sweep(&load(&a.common)?, a.checkpoint.as_deref()),
        Command::Ablate(c) => commands::cmd_ablate(&load(&c)?),
        Command::Diagnose(a) => commands::cmd_diagnose(&load(&a.common)?, a.checkpoint.as_deref()),
        Command::Synth {
            out,
            users,
            items,
            clusters,
            noise,
            seed,
            identical_modalities,
        } => commands::cmd_synth(&SynthArgs {
            out,
            users,
            items,
            clusters,
            noise,
            seed,
            identical_modalities,
        }),
    }
}

/// 1 usage, 2 data, 3 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 1,
                Error::Numeric(_) | Error::NonFiniteGradient(_) => 3,
                Error::Io { .. } | Error::Parse { .. } | Error::Format(_) | Error::Dimension(_) | Error::Data(_) => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("BRIDGECAL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not cap threads at {n}: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
