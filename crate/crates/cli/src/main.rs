//! `qpp`: generate workloads, trace them through the pipeline simulator,
//! train the latency predictor, and evaluate it.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit codes: 0 success, 1 usage or configuration error, 2 data or
/// contract violation during a run.
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser)]
#[command(name = "qpp", version, about = "Query performance prediction toolkit")]
struct Cli {
    /// Path to the declarative run configuration (TOML).
    #[arg(long, global = true, default_value = "qpp.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TraceMode {
    /// Serial full-collection traces (stage-1 training data).
    Full,
    /// Probe traces labeled with the parallel run's latency.
    Probe,
    /// Full parallel traces with latency labels.
    ParallelLabel,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainStage {
    Ocp,
    Qpp,
}

#[derive(Subcommand)]
enum Command {
    /// Expand the configured workload into pipeline spec files.
    Generate,
    /// Execute generated specs and write trace files.
    Trace {
        #[arg(long, value_enum)]
        mode: TraceMode,
    },
    /// Train one stage and write a checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: TrainStage,
        /// Ablation: skip the resource-competition attention adjustment.
        #[arg(long)]
        no_res_attn: bool,
        /// Ablation: skip the per-operator cost predictors.
        #[arg(long)]
        no_ocp: bool,
    },
    /// Evaluate a checkpoint on the held-out templates.
    Eval {
        /// Checkpoint to evaluate (defaults to <out_dir>/bundle.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated noise levels for the robustness table.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        /// Restrict cardinality noise to table scans.
        #[arg(long)]
        scans_only: bool,
        /// Latency percentiles cutting the report groups.
        #[arg(long, value_delimiter = ',', default_values_t = vec![25.0, 50.0, 75.0])]
        group_percentiles: Vec<f64>,
    },
    /// Re-render the summary markdown from a per-query CSV.
    Report {
        #[arg(long)]
        per_query: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let config = match config::RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let config_bytes = std::fs::read(&cli.config).unwrap_or_default();

    let result = match cli.command {
        Command::Generate => commands::generate(&config, &config_bytes),
        Command::Trace { mode } => commands::trace(&config, &config_bytes, mode),
        Command::Train { stage, no_res_attn, no_ocp } => {
            commands::train(&config, &config_bytes, stage, no_res_attn, no_ocp)
        }
        Command::Eval { checkpoint, sigmas, scans_only, group_percentiles } => commands::eval(
            &config,
            &config_bytes,
            checkpoint,
            &sigmas,
            scans_only,
            &group_percentiles,
        ),
        Command::Report { per_query, out } => commands::report(&per_query, out.as_deref()),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
