//! `hsiad` command-line tool.

mod commands;
mod config;
mod staging;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{load_or_default, DetectJob, DetectorKind, EvalJob, MaskPreviewJob, SynthJob, TrainJob};
use staging::Staging;

#[derive(Parser)]
#[command(name = "hsiad", version, about = "Hyperspectral anomaly detection toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON job file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory, created atomically on success.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val/test dataset.
    Synth {
        /// Anomaly-free training cubes.
        #[arg(long)]
        train_count: Option<usize>,
        /// Test scenes with implanted anomalies.
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Train the enhancement network on a dataset directory.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation cube for model selection (default: the dataset's own).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Epoch budget.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Base channel width.
        #[arg(long)]
        channels: Option<usize>,
        /// Leading bands fed to the network (default: all).
        #[arg(long)]
        bands: Option<usize>,
        /// Start from the identity map.
        #[arg(long)]
        zero_residual_start: bool,
    },
    /// Score every cube of a file or directory.
    Detect {
        /// A cube stem or a directory of cubes.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        detector: Option<DetectorKind>,
        /// Model stem for the enhanced detector.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// LRX inner window side.
        #[arg(long)]
        inner: Option<usize>,
        /// LRX outer window side.
        #[arg(long)]
        outer: Option<usize>,
        /// Also write the residual cubes (enhanced detector only).
        #[arg(long)]
        emit_residual: bool,
    },
    /// Compute metrics for score maps against ground truth.
    Eval {
        /// Score directory written by `detect`.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Directory of `<scene>.pgm` truth maps.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Second score directory reported side by side.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Write sample mask maps as PGM images.
    MaskPreview {
        /// Number of masks to draw.
        #[arg(long)]
        count: Option<usize>,
    },
}

fn set_if<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    if let Some(n) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let out = common.out.as_deref().context("--out is required")?;
    let stage = Staging::new(out, common.force)?;
    let dir = stage.path();
    let config = common.config.as_deref();

    match cli.command {
        Command::Synth { train_count, test_count } => {
            let mut job: SynthJob = load_or_default(config)?;
            set_if(&mut job.seed, common.seed);
            set_if(&mut job.train_count, train_count);
            set_if(&mut job.test_count, test_count);
            commands::synth(&job, dir)?;
        }
        Command::Train { data, val, max_epochs, channels, bands, zero_residual_start } => {
            let mut job: TrainJob = load_or_default(config)?;
            set_if(&mut job.train.seed, common.seed);
            set_if(&mut job.train.max_epochs, max_epochs);
            set_if(&mut job.network.channels, channels);
            if data.is_some() {
                job.data = data;
            }
            if val.is_some() {
                job.val = val;
            }
            if bands.is_some() {
                job.network.bands = bands;
            }
            job.network.zero_residual_start |= zero_residual_start;
            commands::train_cmd(&job, dir)?;
        }
        Command::Detect { input, detector, checkpoint, inner, outer, emit_residual } => {
            let mut job: DetectJob = load_or_default(config)?;
            set_if(&mut job.detector, detector);
            set_if(&mut job.window.inner, inner);
            set_if(&mut job.window.outer, outer);
            if input.is_some() {
                job.input = input;
            }
            if checkpoint.is_some() {
                job.checkpoint = checkpoint;
            }
            job.emit_residual |= emit_residual;
            commands::detect(&job, dir)?;
        }
        Command::Eval { scores, truth, baseline } => {
            let mut job: EvalJob = load_or_default(config)?;
            if scores.is_some() {
                job.scores = scores;
            }
            if truth.is_some() {
                job.truth = truth;
            }
            if baseline.is_some() {
                job.baseline = baseline;
            }
            commands::eval(&job, dir)?;
        }
        Command::MaskPreview { count } => {
            let mut job: MaskPreviewJob = load_or_default(config)?;
            set_if(&mut job.seed, common.seed);
            set_if(&mut job.count, count);
            commands::mask_preview(&job, dir)?;
        }
    }
    let written = stage.commit()?;
    log::info!("results in {}", written.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
