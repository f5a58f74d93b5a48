use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod run;

use config::{Overrides, RunConfig};
use run::Failure;

/// Layer-parallel ADMM training of graph-augmented MLPs.
#[derive(Debug, Parser)]
#[command(name = "pdadmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, a checkpoint and manifest.json.
    Train(Overrides),
    /// Print train and test accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Per-epoch time of the layer-parallel executor against sequential runs.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated worker counts.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        workers: Vec<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Epochs averaged per measurement, after one warm-up epoch.
        #[arg(long, default_value_t = 10)]
        timed_epochs: usize,
    },
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(o) => {
            let cfg = RunConfig::resolve(&o).map_err(Failure::Input)?;
            run::train(&cfg)?;
            eprintln!("wrote {}", run::manifest_path(&cfg.output).display());
        }
        Command::Eval { checkpoint, dataset } => print!("{}", run::eval(&checkpoint, &dataset)?),
        Command::Benchmark { config, workers, dataset, timed_epochs } => {
            // the worker list takes the place of the config's worker count
            let o = Overrides { config: Some(config), dataset, workers: Some(1), ..Overrides::default() };
            let cfg = RunConfig::resolve(&o).map_err(Failure::Input)?;
            print!("{}", run::benchmark(&cfg, &workers, timed_epochs)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.exit_code())
        }
    }
}
