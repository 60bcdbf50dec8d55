use std::path::PathBuf;
use std::process::ExitCode;

use busseg::commands::{self, CmdError};
use clap::{Args, Parser, Subcommand};

/// Open-set domain adaptation for segmentation on a synthetic benchmark.
///
/// Exit codes: 0 success, 1 usage or config error, 2 I/O error, 3 validation error.
#[derive(Parser)]
#[command(name = "busseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines); defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Sets both the data seed and the trainer seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides one config key; repeatable, applied last.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a benchmark archive and prints its checksum.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Trains one mode on an archive; writes checkpoint, log and curves.
    Train {
        #[command(flatten)]
        common: Common,
        /// conf_threshold | head_expansion | head_expansion_decon | head_expansion_remix | bus_full
        #[arg(long, value_name = "NAME")]
        mode: Option<String>,
        /// Archive to train on; defaults to `run.archive_dir`.
        #[arg(long, value_name = "DIR")]
        archive: Option<PathBuf>,
    },
    /// Scores a checkpoint on an archive; prints common, private and H.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        archive: PathBuf,
        /// Defaults to the checkpoint's directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Number of prediction images to export.
        #[arg(long, value_name = "N", default_value_t = 8)]
        visualizations: usize,
    },
    /// Runs all five modes for every seed and writes the summary table.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = commands::load_config(common.config.as_deref(), None, common.seed, &common.overrides)?;
            let out = common.out.unwrap_or_else(|| cfg.archive_dir.clone().into());
            let sum = commands::generate(&cfg, &out)?;
            println!("sha256:{sum}");
        }
        Command::Train { common, mode, archive } => {
            let cfg = commands::load_config(common.config.as_deref(), mode.as_deref(), common.seed, &common.overrides)?;
            let archive = archive.unwrap_or_else(|| cfg.archive_dir.clone().into());
            let out = common
                .out
                .unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join(cfg.trainer.mode.name()));
            let ck = commands::train(&cfg, &archive, &out)?;
            println!("{}", out.join("checkpoint.txt").display());
            eprintln!("trained {} for {} steps", cfg.trainer.mode.name(), ck.step);
        }
        Command::Eval {
            checkpoint,
            archive,
            out,
            visualizations,
        } => {
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map_or_else(|| PathBuf::from("."), PathBuf::from)
            });
            let report = commands::eval(&checkpoint, &archive, &out, visualizations)?;
            println!("{}", report.summary_line());
        }
        Command::Ablate { common } => {
            let mut cfg = commands::load_config(common.config.as_deref(), None, None, &common.overrides)?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let out = common.out.unwrap_or_else(|| cfg.out_dir.clone().into());
            let runs = commands::ablate(&cfg, &out)?;
            print!("{}", commands::summary_csv(&runs));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("busseg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
