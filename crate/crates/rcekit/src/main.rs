use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rcekit::cli::{self, Stage};

#[derive(Parser)]
#[command(
    name = "rcekit",
    about = "Train classifiers with reverse cross-entropy, attack them, and detect adversarial inputs",
    version
)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,

    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-image attack and eval jobs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus a loss trace.
    Train,
    /// Attack test inputs and write adversarial examples plus a CSV.
    Attack,
    /// Fit a detector, pick its threshold, and write pass/NOT-SURE verdicts.
    Detect,
    /// Run the full evaluation protocol and emit CSV/JSON reports.
    Eval,
    /// Numerically verify the softmax-geometry theorems.
    VerifyTheory,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let stage = match args.cmd {
        Cmd::Train => Stage::Train,
        Cmd::Attack => Stage::Attack,
        Cmd::Detect => Stage::Detect,
        Cmd::Eval => Stage::Eval,
        Cmd::VerifyTheory => Stage::VerifyTheory,
    };

    // verify-theory runs on defaults when no config is given
    let config_text = match &args.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => Some(t),
            Err(e) => {
                eprintln!("error: cannot read config {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => None,
    };

    let mut config = match config_text {
        Some(text) => match cli::validate_config(&text) {
            Ok(c) => c,
            Err(errors) => {
                eprintln!("config validation failed:");
                for e in &errors {
                    eprintln!("  - {e}");
                }
                return ExitCode::from(2);
            }
        },
        None => {
            if stage == Stage::VerifyTheory {
                let seed = args.seed.unwrap_or(0);
                return match cli::run_verify_theory_default(seed) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => {
                        eprintln!("stage verify-theory: {e}");
                        ExitCode::from(1)
                    }
                };
            }
            eprintln!("error: --config is required for {}", stage.name());
            return ExitCode::from(2);
        }
    };

    if let Some(out) = args.out {
        config.out = out;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = Some(threads);
    }

    match cli::run(stage, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stage {}: {e}", stage.name());
            ExitCode::from(1)
        }
    }
}
