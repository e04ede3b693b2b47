//! `trinity` binary. Every subcommand reads one optional TOML config, takes
//! the same override flags, and reports failures through four exit codes:
//! 0 success, 2 bad config or usage, 3 episode budget exhausted, 4 agent
//! transport failure.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trinity_cli::config::{ConfigError, ExperimentConfig};
use trinity_cli::drivers;
use trinity_cli::experiment::{self, RunError};
use trinity_core::coordination::EpisodeError;
use trinity_core::trainers::TrainError;

#[derive(Parser)]
#[command(name = "trinity", version, about = "Multi-turn coordination over an agent pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Every key has a default, so the flag is
    /// optional everywhere except `replay`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, default_value = "trinity-out")]
    out: PathBuf,
    /// Override the training episode budget.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured trainer across seeds and evaluate the result.
    Train(Common),
    /// Evaluate a saved checkpoint on the held-out stream.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Head checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run all four trainers on matched budgets and aggregate the scores.
    CompareOptimizers(Common),
    /// Measure separability, recombination, and gain-ratio predictions on a
    /// synthetic objective.
    TheoryVerify(Common),
    /// Sweep synthetic representation datasets with a linear probe.
    Probe(Common),
    /// Enumerate the best dataset and model subsets of a competence matrix.
    SelectSubsets(Common),
    /// Re-run an experiment from its resolved config echo.
    Replay(Common),
}

fn resolve(common: &Common) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(budget) = common.budget {
        cfg.trainer.b_env = budget;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(out: &std::path::Path) {
    if let Ok(text) = fs::read_to_string(out.join("summary.txt")) {
        print!("{text}");
    }
    println!("artifacts: {}", out.display());
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve(&common)?;
            experiment::run_experiment(&cfg, &common.out)?;
            print_summary(&common.out);
        }
        Command::CompareOptimizers(common) => {
            let cfg = resolve(&common)?;
            experiment::run_comparison(&cfg, &common.out)?;
            print_summary(&common.out);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let seed = cfg.run.seeds[0];
            let (reward, counts) = experiment::eval_checkpoint(&cfg, &checkpoint, seed)?;
            let mut text = String::new();
            let _ = writeln!(text, "checkpoint: {}", checkpoint.display());
            let _ = writeln!(text, "seed: {seed}");
            let _ = writeln!(text, "episodes: {}", cfg.run.eval_episodes);
            let _ = writeln!(text, "eval reward: {reward}");
            let turns = counts.turns.max(1) as f64;
            let roles: Vec<String> =
                counts.role.iter().map(|&c| format!("{:.3}", c as f64 / turns)).collect();
            let _ = writeln!(text, "role fractions (T/W/V): {}", roles.join("/"));
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join("eval.txt"), &text)?;
            print!("{text}");
        }
        Command::TheoryVerify(common) => {
            let cfg = resolve(&common)?;
            let seed = cfg.run.seeds[0];
            let report = drivers::run_theory(&cfg, &common.out, common.budget, seed)?;
            print!("{report}");
            println!("artifacts: {}", common.out.display());
        }
        Command::Probe(common) => {
            let cfg = resolve(&common)?;
            let seed = cfg.run.seeds[0];
            drivers::run_probe(&cfg, &common.out, seed)?;
            print_summary(&common.out);
        }
        Command::SelectSubsets(common) => {
            let cfg = resolve(&common)?;
            let outcome = drivers::run_selection(&cfg, &common.out)?;
            println!("{outcome}");
            println!("artifacts: {}", common.out.display());
        }
        Command::Replay(common) => {
            let path = common.config.as_ref().ok_or_else(|| {
                ConfigError::Invalid("replay needs --config pointing at a resolved config".into())
            })?;
            if common.seed.is_some() || common.budget.is_some() {
                return Err(ConfigError::Invalid(
                    "replay reruns the resolved config exactly; drop --seed and --budget".into(),
                )
                .into());
            }
            let cfg = ExperimentConfig::load(path)?;
            cfg.validate()?;
            match cfg.run.mode.as_str() {
                "compare" => {
                    experiment::run_comparison(&cfg, &common.out)?;
                }
                _ => {
                    experiment::run_experiment(&cfg, &common.out)?;
                }
            }
            print_summary(&common.out);
        }
    }
    Ok(())
}

/// 2: the run never started (bad config, usage, or checkpoint shape).
/// 3: the episode budget ran out or could not cover a single step.
/// 4: the agent transport failed mid-episode.
fn exit_code_for(err: &RunError) -> u8 {
    match err {
        RunError::Train(TrainError::Episode(EpisodeError::Transport { .. })) => 4,
        RunError::Train(TrainError::Episode(EpisodeError::Budget(_)))
        | RunError::Train(TrainError::Budget(_))
        | RunError::Train(TrainError::BudgetTooSmall { .. }) => 3,
        RunError::Io(_) | RunError::Numeric(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
