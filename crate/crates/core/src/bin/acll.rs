use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use acll::config::{load_config, validate_config, ConfigError, run_experiment};

#[derive(Parser)]
#[command(name = "acll", version, about = "Adaptive compression-based lifelong learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy of a config and write reports.
    Run {
        config: PathBuf,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and list every problem found.
    Validate { config: PathBuf },
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Validate { config } => match validate_config(&config) {
            Ok(diags) if diags.is_empty() => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Ok(diags) => {
                for d in &diags {
                    eprintln!("{}: {d}", config.display());
                }
                ExitCode::from(EXIT_CONFIG)
            }
            Err(e) => {
                eprintln!("{}: {e}", config.display());
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Run { config, seed, out } => {
            let mut cfg = match load_config(&config) {
                Ok(cfg) => cfg,
                Err(e @ (ConfigError::Syntax { .. } | ConfigError::Invalid(_) | ConfigError::Io(_))) => {
                    eprintln!("{}: {e}", config.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            match run_experiment(&cfg) {
                Ok(runs) => {
                    for run in &runs {
                        let r = &run.report;
                        println!(
                            "{}: average accuracy {:.4}, {} risk evaluations",
                            r.label,
                            r.average_end_accuracy(),
                            r.total_risk_evaluations
                        );
                    }
                    println!("wrote {}", cfg.out_dir.join("summary.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}
