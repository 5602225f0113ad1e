//! Batch entry point: run swarm experiments, benchmark the codec, and print
//! timing reports. Exit codes are a stable contract: 0 success, 2 config
//! error, 3 runtime error.

mod commands;
mod summary;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparseloco::Error;

#[derive(Parser)]
#[command(
    name = "sparseloco",
    version,
    about = "Sparse local-update training swarm simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct RunOverrides {
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override run.rounds.
    #[arg(long)]
    rounds: Option<u64>,
    /// Override run.workers (peer-compute parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Override run.out (output directory).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a training run described by a config file.
    Run {
        /// Path to the TOML run configuration.
        #[arg(long)]
        config: String,
        #[command(flatten)]
        overrides: RunOverrides,
        /// Print the fully-resolved configuration and exit.
        #[arg(long)]
        print_effective_config: bool,
    },
    /// Measure wire-format overhead and compression ratios.
    CodecBench {
        /// Optional config supplying the geometry; defaults otherwise.
        #[arg(long)]
        config: Option<String>,
        /// Elements in the benchmark delta.
        #[arg(long, default_value_t = 4_194_304)]
        elements: usize,
    },
    /// Per-round communication time and compute utilization.
    Timing {
        /// Optional config supplying the timing model; defaults otherwise.
        #[arg(long)]
        config: Option<String>,
        /// Named reference point: default | intellect1 | sparseloco-8b.
        #[arg(long)]
        preset: Option<String>,
        /// Rows in the emitted timeline.
        #[arg(long, default_value_t = 8)]
        rounds: u64,
        /// Upload bytes per round (ignored with --preset).
        #[arg(long, default_value_t = 0)]
        up_bytes: u64,
        /// Download bytes per round (ignored with --preset).
        #[arg(long, default_value_t = 0)]
        down_bytes: u64,
    },
    /// Summarize a finished run directory from its logs alone.
    Report {
        /// Output directory of a previous run.
        #[arg(long)]
        dir: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            overrides,
            print_effective_config,
        } => commands::cmd_run(&config, &overrides, print_effective_config),
        Command::CodecBench { config, elements } => {
            commands::cmd_codec_bench(config.as_deref(), elements)
        }
        Command::Timing {
            config,
            preset,
            rounds,
            up_bytes,
            down_bytes,
        } => commands::cmd_timing(
            config.as_deref(),
            preset.as_deref(),
            rounds,
            up_bytes,
            down_bytes,
        ),
        Command::Report { dir } => commands::cmd_report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
