//! `reidlab`: data generation, training, transfer, ablation and evaluation.
//!
//! Exit codes: 0 on success, 1 on invalid input (config, flags, datasets),
//! 2 on runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reidlab::gate::MaskStrategy;
use reidlab::pipeline::ablation::Preset;
use reidlab::pipeline::Task;
use reidlab::verify::Suite;

#[derive(Parser, Debug)]
#[command(name = "reidlab", version, about = "Knowledge-transfer re-identification experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the commands that create a run directory.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct RunOverrides {
    /// Parent directory for run outputs (overrides `paths.runs`).
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Run directory suffix (overrides `paths.tag`).
    #[arg(long)]
    pub tag: Option<String>,
    /// Base seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset to disk.
    GenData {
        /// JSON dataset spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one task, optionally starting from transferred weights.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Source checkpoint to prefix-load (overrides `paths.source_weights`).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Backbone stages kept for re-id (overrides `train.reid.keep_stages`).
        #[arg(long, value_parser = clap::value_parser!(u8).range(3..=5))]
        stages: Option<u8>,
        /// Mask strategy (overrides `gate.strategy`).
        #[arg(long, value_parser = parse_mask)]
        mask: Option<MaskStrategy>,
        #[command(flatten)]
        run: RunOverrides,
    },
    /// Run an ablation preset over several seeds.
    Ablate {
        #[arg(long, value_parser = parse_preset)]
        preset: Preset,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        run: RunOverrides,
    },
    /// Evaluate re-id weights on the held-out identities.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        run: RunOverrides,
    },
    /// Run a verification oracle suite.
    Check {
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: reidlab::Error| e.to_string())
}

fn parse_mask(s: &str) -> Result<MaskStrategy, String> {
    s.parse().map_err(|e: reidlab::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: reidlab::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: reidlab::Error| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<reidlab::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData { spec, out, force } => commands::gen_data(&spec, &out, force),
        Command::Train { config, task, from, stages, mask, run } => {
            commands::train(&config, task, from, stages.map(usize::from), mask, &run)
        }
        Command::Ablate { preset, config, run } => commands::ablate(&config, preset, &run),
        Command::Eval { config, weights, run } => commands::eval(&config, &weights, &run),
        Command::Check { suite, seed } => commands::check(suite, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
