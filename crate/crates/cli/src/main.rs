//! `chm`: synthetic data, training, matching, evaluation and diagnostics.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
//! 3 selfcheck failure.

mod commands;
mod config;
mod dataset;
mod error;
mod selfcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use chm_core::kernel::DumpFormat;

use crate::commands::{BenchArgs, MatchArgs};
use crate::config::RunConfig;
use crate::error::CliError;

/// Thread-count variable. Accepted for forward compatibility; every
/// command currently runs on one thread.
const THREADS_VAR: &str = "CHM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "chm", version, about = "Convolutional Hough matching on synthetic image pairs")]
struct Cli {
    /// Seed for data generation, initialization and shuffling (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "chm-out")]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Layer {
    #[value(name = "6d")]
    SixD,
    #[value(name = "4d")]
    FourD,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Classes,
    Dense,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic pairs (source, target, mask, keypoints, transform).
    Synth {
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train on a dataset directory; writes checkpoint.txt and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Match one image pair; writes flow.csv, scale_hist.csv and transferred keypoints.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Source keypoints, `id,x_px,y_px`.
        #[arg(long)]
        keypoints: Option<PathBuf>,
        /// Also write the final 4D correlation as correlation.csv.
        #[arg(long)]
        dump_corr: bool,
    },
    /// PCK over a dataset; writes pck.csv and scale_hist.csv.
    EvalPck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Pooled precision-recall over a dataset; writes pr.csv.
    EvalPr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also evaluate the global-voting baseline (pr_rhm.csv).
        #[arg(long)]
        baseline: bool,
    },
    /// Time and count the three convolution routes; writes bench_conv.csv.
    BenchConv {
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 15)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        kernel: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Dump a CHM kernel's classes or dense maps.
    DumpKernel {
        #[arg(long, value_enum, default_value = "6d")]
        layer: Layer,
        #[arg(long, value_enum, default_value = "classes")]
        format: Format,
        /// Take the kernel from a checkpoint instead of initializing it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selfcheck,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let n = threads()?;
    if n > 1 {
        info!("{THREADS_VAR}={n}: running single-threaded");
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth { pairs } => {
            if let Some(p) = pairs {
                cfg.pairs = p;
            }
            commands::synth(&cfg, out)
        }
        Command::Train { data } => commands::train_cmd(&cfg, out, &data),
        Command::Match { checkpoint, source, target, keypoints, dump_corr } => commands::match_cmd(
            &cfg,
            out,
            &MatchArgs { checkpoint: &checkpoint, source: &source, target: &target, keypoints: keypoints.as_deref(), dump_corr },
        ),
        Command::EvalPck { checkpoint, data } => commands::eval_pck(&cfg, out, &checkpoint, &data),
        Command::EvalPr { checkpoint, data, baseline } => commands::eval_pr(&cfg, out, &checkpoint, &data, baseline),
        Command::BenchConv { rank, size, kernel, repeats } => {
            commands::bench_conv(&cfg, out, &BenchArgs { rank, size, kernel, repeats })
        }
        Command::DumpKernel { layer, format, checkpoint } => {
            let layer = match layer {
                Layer::SixD => "6d",
                Layer::FourD => "4d",
            };
            let format = match format {
                Format::Classes => DumpFormat::Classes,
                Format::Dense => DumpFormat::DenseMaps,
            };
            commands::dump_kernel(&cfg, out, layer, format, checkpoint.as_deref())
        }
        Command::Selfcheck => selfcheck::selfcheck(&cfg, out),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
