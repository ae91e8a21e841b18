use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use enginefault::dataset::Part;
use enginefault::models::ModelKind;
use enginefault_cli::{
    commands, load_config, CliError, Overrides, RunConfig, EXIT_USAGE, THREADS_ENV,
};

/// Simulated engine fault corpus, preprocessing and fault classifiers.
#[derive(Debug, Parser)]
#[command(name = "enginefault", version)]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use this seed for generation, splitting, init and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model to train or evaluate.
    #[arg(long, global = true, value_enum)]
    model: Option<KindArg>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Transformer,
    Rnn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PartArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the fault corpus.
    Generate,
    /// Resample, merge and window the corpus into the window store.
    Preprocess,
    /// Train a model and score it on the test split.
    Train,
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: PartArg,
    },
    /// Per-step prediction for one raw run.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Gather training curves and test scores of every trained model.
    Report,
}

fn setup_threads(cfg: &RunConfig) -> Result<(), CliError> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            CliError::Validation(vec![format!(
                "{THREADS_ENV} must be a non-negative integer, got `{v}`"
            )])
        })?,
        Err(_) => cfg.threads,
    };
    if threads > 0 && !enginefault::par::init_thread_pool(threads) {
        log::warn!("could not size the worker pool to {threads} threads");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        model: cli.model.map(|k| match k {
            KindArg::Transformer => ModelKind::Transformer,
            KindArg::Rnn => ModelKind::Rnn,
        }),
        epochs: cli.epochs,
    };
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    setup_threads(&cfg)?;
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Evaluate { checkpoint, split } => {
            let part = match split {
                PartArg::Train => Part::Train,
                PartArg::Val => Part::Val,
                PartArg::Test => Part::Test,
            };
            commands::evaluate(&cfg, &checkpoint, part)
        }
        Command::Predict { checkpoint, run } => commands::predict(&cfg, &checkpoint, &run),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
