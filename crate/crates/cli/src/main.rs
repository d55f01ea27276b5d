use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Egocentric motion capture: synthetic scenes, tracking, evaluation and
/// dataset augmentation.
#[derive(Debug, Parser)]
#[command(name = "egomocap", version)]
struct Cli {
    /// Override the random seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write a per-iteration energy log (JSONL).
    #[arg(long, global = true)]
    trace: bool,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic bundle (images, detections, ground truth).
    Synth { config: PathBuf },
    /// Track a bundle frame by frame.
    Track { config: PathBuf },
    /// Score predicted poses against ground truth.
    Evaluate { config: PathBuf },
    /// Green-screen augmentation with reprojected annotations.
    Augment { config: PathBuf },
    /// Draw poses over camera images.
    Overlay { config: PathBuf },
}

pub struct Flags {
    pub seed: Option<u64>,
    pub trace: bool,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_DATA);
        }
    };
    let flags = Flags {
        seed: cli.seed,
        trace: cli.trace,
    };
    let result = pool.install(|| match &cli.command {
        Command::Synth { config } => commands::synth(config, &flags),
        Command::Track { config } => commands::track(config, &flags),
        Command::Evaluate { config } => commands::evaluate(config, &flags),
        Command::Augment { config } => commands::augment(config, &flags),
        Command::Overlay { config } => commands::overlay(config, &flags),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|cause| {
        cause
            .downcast_ref::<egomocap::Error>()
            .is_some_and(egomocap::Error::is_numerical)
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}
