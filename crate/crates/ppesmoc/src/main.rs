//! Command-line experiment runner.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ppesmoc::harness::{aggregate_dir, run_all, ExperimentConfig};
use ppesmoc::problems;

#[derive(Parser)]
#[command(name = "ppesmoc", about = "Batch constrained multi-objective Bayesian optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all repetitions of an experiment described by a TOML config
    Run {
        /// path to the experiment configuration file
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate the per-repetition CSV traces in a directory
    Aggregate {
        /// directory holding rep_*.csv files
        #[arg(long)]
        dir: PathBuf,
    },
    /// List the built-in benchmark problems
    BenchList,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            let records = run_all(&cfg)?;
            println!(
                "wrote {} repetition trace(s) to {}",
                records.len(),
                cfg.output_dir
            );
        }
        Command::Aggregate { dir } => {
            let rows = aggregate_dir(&dir)?;
            println!(
                "wrote aggregate.csv ({} iterations) to {}",
                rows.len(),
                dir.display()
            );
        }
        Command::BenchList => {
            for name in problems::benchmark_names() {
                let p = problems::by_name(name).expect("built-in problem");
                println!(
                    "{name}: d={}, objectives={}, constraints={}",
                    p.dim(),
                    p.num_objectives,
                    p.num_constraints
                );
            }
        }
    }
    Ok(())
}
