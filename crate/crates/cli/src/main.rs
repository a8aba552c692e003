mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bregkge", version, about = "Knowledge graph embedding losses as Bregman divergences")]
struct Cli {
    /// Worker threads; 1 is the reference mode and every count gives identical results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Start from this checkpoint (overrides the config).
        #[arg(long)]
        warm_start: Option<PathBuf>,
        /// Parent of the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Filtered ranking metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: commands::Split,
    },
    /// Certify optimal objective distributions on random small worlds.
    Oracle {
        /// One of ns-uni, ns-freq, sce, sce-bc, sce-ls, sans, or all.
        #[arg(long, default_value = "all")]
        row: String,
        #[arg(long, default_value_t = 1)]
        nu: usize,
        #[arg(long, default_value_t = 20)]
        worlds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pointwise divergences of the two losses against a reference probability.
    Curve {
        #[arg(long = "ref", default_value_t = 0.5)]
        reference: f64,
        #[arg(long, default_value_t = 999)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split sizes and train/test KL divergence.
    Stats {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Also write the numbers as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Pre-train, warm-start fine-tune, and a cold-start control run.
    PretrainPipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        finetune: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(commands::EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(commands::EXIT_CONFIG);
        }
    }
    let result = match cli.command {
        Command::Train {
            config,
            warm_start,
            out,
        } => commands::train(&config, warm_start, &out),
        Command::Evaluate {
            config,
            checkpoint,
            split,
        } => commands::evaluate(&config, &checkpoint, split),
        Command::Oracle {
            row,
            nu,
            worlds,
            seed,
        } => commands::oracle(&row, nu, worlds, seed),
        Command::Curve {
            reference,
            points,
            out,
        } => commands::curve(reference, points, &out),
        Command::Stats { train, test, csv } => commands::stats(&train, &test, csv.as_deref()),
        Command::PretrainPipeline {
            config,
            finetune,
            out,
        } => commands::pipeline(&config, &finetune, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
