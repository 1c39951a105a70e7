//! `sepctl` — scenario-driven separated control runs.
//!
//! Workflows: `solve` synthesizes a strategy offline from the model alone;
//! `simulate` evaluates a synthesized strategy against a simulated plant;
//! `learn` closes the loop, refining the strategy's trajectory targets from
//! realized outputs; `reproduce-example` runs the built-in two-step worked
//! example through every pipeline and cross-checks them; `compare` scores
//! known-plant, model-only, and learned strategies on paired episodes.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 solver failure,
//! 4 convergence failure under `--strict`, 5 worked-example reproduction
//! failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::RunOverrides;

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }
    pub fn solver(message: String) -> Self {
        Self { code: 3, message }
    }
    pub fn convergence(message: String) -> Self {
        Self { code: 4, message }
    }
    pub fn reproduction(message: String) -> Self {
        Self { code: 5, message }
    }
}

#[derive(Parser)]
#[command(
    name = "sepctl",
    version,
    about = "Separated learning and control for finite-horizon linear systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a strategy offline from the model section of a scenario.
    Solve {
        /// Scenario description (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's discrepancy-penalty weight.
        #[arg(long)]
        beta: Option<f64>,
        /// Also write a machine-readable synthesis summary here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a synthesized strategy against the scenario's simulated plant.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's episode count.
        #[arg(long)]
        episodes: Option<u64>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's discrepancy-penalty weight.
        #[arg(long)]
        beta: Option<f64>,
        /// Write the run report here instead of <output>/report.json.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Dump the first episodes (at most 256) as CSV to this path.
        #[arg(long)]
        dump_episodes: Option<PathBuf>,
    },
    /// Learn trajectory targets from realized plant outputs, then bind them.
    Learn {
        #[arg(long)]
        config: PathBuf,
        /// Episodes per refinement round (overrides the config).
        #[arg(long)]
        episodes: Option<u64>,
        /// Refinement rounds (overrides the config).
        #[arg(long)]
        outer: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Fail (exit 4) if the targets are still drifting after the last round.
        #[arg(long)]
        strict: bool,
        /// Write the learning report here instead of <output>/learn_report.json.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Dump evaluation episodes of the learned strategy as CSV.
        #[arg(long)]
        dump_episodes: Option<PathBuf>,
    },
    /// Cross-check every pipeline on the built-in two-step worked example.
    ReproduceExample {
        /// Monte Carlo episodes per diagnostic (default 100000).
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Force the initial-state/disturbance correlation sign (+ or -)
        /// instead of adjudicating it.
        #[arg(long, value_parser = commands::parse_cov_sign, allow_hyphen_values = true)]
        cov_sign: Option<sepctl::oracle::example::CovarianceSign>,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score known-plant, model-only, and learned strategies on paired episodes.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Evaluation episodes per strategy (overrides the config).
        #[arg(long)]
        episodes: Option<u64>,
        /// Learning rounds for the learned strategy (overrides the config).
        #[arg(long)]
        outer: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Fail (exit 4) if the learned route did not converge.
        #[arg(long)]
        strict: bool,
        /// Write the comparison summary here instead of <output>/compare.json.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { config, beta, json } => commands::cmd_solve(&config, beta, json),
        Command::Simulate {
            config,
            episodes,
            seed,
            beta,
            json,
            dump_episodes,
        } => commands::cmd_simulate(
            &config,
            RunOverrides {
                episodes,
                seed,
                beta,
                outer: None,
            },
            json,
            dump_episodes,
        ),
        Command::Learn {
            config,
            episodes,
            outer,
            seed,
            beta,
            strict,
            json,
            dump_episodes,
        } => commands::cmd_learn(
            &config,
            RunOverrides {
                episodes,
                outer,
                seed,
                beta,
            },
            strict,
            json,
            dump_episodes,
        ),
        Command::ReproduceExample {
            episodes,
            seed,
            cov_sign,
            json,
        } => commands::cmd_reproduce_example(episodes, seed, cov_sign, json),
        Command::Compare {
            config,
            episodes,
            outer,
            seed,
            beta,
            strict,
            json,
        } => commands::cmd_compare(
            &config,
            RunOverrides {
                episodes,
                outer,
                seed,
                beta,
            },
            strict,
            json,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
