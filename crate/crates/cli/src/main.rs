use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;
mod plot;

use commands::Common;

#[derive(Debug, Parser)]
#[command(name = "adwpf", version, about = "Attention-driven multi-tab webpage fingerprinting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-tab dataset and its provenance sidecar.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Comma-separated weights of 1..=5 tab sessions.
        #[arg(long)]
        tabs_dist: Option<String>,
    },
    /// Seeded train/validation/test partition.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a model into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset to split; overrides data.* paths in the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a dataset with a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// One training run per grid entry plus a merged comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated entries such as `none,ra,ac,am,ac+am,ac+am+ratt`.
        #[arg(long, default_value = "none,ac,am,ac+am,ac+am+ratt")]
        grid: String,
    },
    /// Write original, cropped and masked traces with strip plots.
    AugmentDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long, default_value_t = 2)]
        n: usize,
        /// Use a freshly initialised model instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::Synth { common, classes, samples, tabs_dist } => commands::synth(&common, classes, samples, tabs_dist.as_deref()),
        Command::Split { common, data } => commands::split(&common, data.as_deref()),
        Command::Train { common, data } => commands::train(&common, data.as_deref()),
        Command::Eval { common, ckpt, data } => commands::eval(&common, &ckpt, &data),
        Command::Ablate { common, data, grid } => commands::ablate(&common, data.as_deref(), &grid),
        Command::AugmentDump { common, ckpt, data, n, untrained } => {
            commands::augment_dump(&common, ckpt.as_deref(), &data, n, untrained)
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", one_line(msg.lines().next().unwrap_or("invalid arguments")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
