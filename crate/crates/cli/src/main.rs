use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kqprune_cli::commands::{self, Split};
use kqprune_cli::config::{Overrides, RunConfig};
use kqprune_cli::error::{CliResult, EXIT_OK};
use kqprune_core::pruning::{SelectionMode, Strategy};

#[derive(Parser)]
#[command(
    name = "kqprune",
    version,
    about = "Key/query channel pruning for linear-attention mixers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `outputDir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of key/query channels removed, in [0, 1).
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SelectionMode>,
    /// Swap tolerance for DRRQR.
    #[arg(long)]
    f: Option<f64>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: kqprune_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<SelectionMode, String> {
    s.parse().map_err(|e: kqprune_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy recall model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Prune a checkpoint and write the plan, calibration dump and rank reports.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the theory checks; exits 1 if any fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Tighten the named check's bound (exercises the failure path).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Mixer throughput and FLOPs at full and compressed key width.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Per-token state spectra and rank utilization as CSV.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Leading tokens to skip (overrides `spectrumSkip`).
        #[arg(long)]
        skip: Option<usize>,
    },
    /// Write recall sequences as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Output file.
        #[arg(long)]
        file: PathBuf,
    },
    /// Recall accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recovery fine-tuning of a (pruned) checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        ratio: common.ratio,
        strategy: common.strategy,
        mode: common.mode,
        f: common.f,
        seed: common.seed,
        out: common.out.clone(),
    });
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common } => commands::train(&config(&common)?).map(drop),
        Command::Prune { common, checkpoint } => {
            commands::prune(&config(&common)?, &checkpoint).map(drop)
        }
        Command::Verify { common, corrupt } => {
            commands::verify(&config(&common)?, corrupt).map(drop)
        }
        Command::Bench { common } => commands::bench(&config(&common)?).map(drop),
        Command::Spectrum {
            common,
            checkpoint,
            skip,
        } => {
            let mut cfg = config(&common)?;
            if let Some(s) = skip {
                cfg.spectrum_skip = s;
            }
            commands::spectrum(&cfg, &checkpoint).map(drop)
        }
        Command::GenData {
            common,
            split,
            count,
            file,
        } => commands::gen_data(&config(&common)?, split, count, &file),
        Command::Eval { common, checkpoint } => {
            commands::eval(&config(&common)?, &checkpoint).map(drop)
        }
        Command::Finetune { common, checkpoint } => {
            commands::finetune(&config(&common)?, &checkpoint).map(drop)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
