use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cds_core::config::ExperimentConfig;
use cds_core::harness;
use cds_core::sharing::SharingStrategy;
use cds_core::{CdsError, Result};

/// Multi-task offline RL with conservative data sharing on tabular MDPs.
#[derive(Parser, Debug)]
#[command(name = "cds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate per-task datasets and a scenario manifest.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one strategy on previously generated datasets.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `generate-data`.
        #[arg(long)]
        data: PathBuf,
        /// Strategy name, e.g. `no-share`, `share-all`, `cds-quantile:50`.
        #[arg(long)]
        strategy: SharingStrategy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact and sampled evaluation of a trained run; writes evaluation.json into it.
    Evaluate {
        run: PathBuf,
    },
    /// Compare runs and compute bound reports.
    Analyze {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every (seed, strategy) cell, aggregated with 95% half-widths.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Seeds to run; defaults to `evaluation.seeds` from the config.
        #[arg(long = "seeds", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Repeatable; defaults to the config's strategy list.
        #[arg(long)]
        strategy: Vec<SharingStrategy>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, u64)> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let seed = self.seed.unwrap_or(cfg.seed);
        Ok((cfg, seed))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common, out } => {
            let (cfg, seed) = common.load()?;
            let manifest = harness::cmd_generate_data(&cfg, seed, &out)?;
            println!("wrote {} datasets to {}", manifest.files.len(), out.display());
        }
        Command::Train { common, data, strategy, out } => {
            let (cfg, seed) = common.load()?;
            let run = harness::cmd_train(&cfg, &data, &strategy, seed, &out)?;
            for (task, j) in run.summary.j.iter().enumerate() {
                println!("task {task}: J = {j:.6} (J* = {:.6})", run.j_star[task]);
            }
        }
        Command::Evaluate { run } => {
            let report = harness::cmd_evaluate(&run)?;
            for t in &report.tasks {
                println!("{}: J = {:.6}, normalized {:.4}, sampled {:.4}", t.name, t.j, t.normalized, t.sampled_return);
            }
        }
        Command::Analyze { runs, out } => {
            let output = harness::cmd_analyze(&runs, &out)?;
            print!("{}", output.scenario.to_csv());
        }
        Command::Sweep { common, seeds, strategy, jobs, out } => {
            let (cfg, _) = common.load()?;
            let seeds = if seeds.is_empty() { cfg.evaluation.seeds.clone() } else { seeds };
            let strategies = if strategy.is_empty() { cfg.strategies()? } else { strategy };
            let report = harness::cmd_sweep(&cfg, &seeds, &strategies, jobs, &out)?;
            print!("{}", harness::aggregate_to_csv(&report.aggregate));
            if !report.failures.is_empty() {
                for f in &report.failures {
                    eprintln!("cell {} seed {} failed: {}", f.strategy, f.seed, f.error);
                }
                return Err(CdsError::InvalidSpec(format!(
                    "{} of {} cells failed",
                    report.failures.len(),
                    seeds.len() * strategies.len()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CdsError::Divergence { .. } = e {
                eprintln!("hint: lower learner.beta or learner.learning_rate");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
