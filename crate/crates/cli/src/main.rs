//! `editloc`: dataset synthesis, diffusion training, feature extraction,
//! segmentation training, evaluation and ablations from one entry point.
//!
//! Exit codes: 0 on success, 1 on usage, configuration or contract errors,
//! 2 on I/O errors and unreadable files.

mod commands;
mod config;
mod stamp;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use editloc::dataset::Split;
use editloc::features::{Side, Variant};

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "editloc",
    version,
    about = "Localize edited regions in images from diffusion-inversion features",
    after_help = "All randomness flows from --seed. Stage seeds are derived as \
                  sha256(seed || stage name) for dataset, diffusion, train and finetune."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML file with [dataset], [diffusion], [features], [model], [train],
    /// [finetune] and [eval] sections, or a run.json from an earlier run.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Top-level seed; overrides `seed` in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key, e.g. `--set train.learning_rate=2e-3`.
    /// Repeatable; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize original/edited/mask triples and write manifest.json.
    BuildDataset {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        edited_fraction: Option<f64>,
        /// Canvas side in pixels (a power of two, at least 32).
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the pixel-space denoiser on the originals of the train split.
    TrainDiffusion {
        /// Dataset directory or its manifest.json.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Output directory; receives diffusion.ckpt and diffusion_log.jsonl.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Invert every selected image once and cache feature stacks.
    ExtractFeatures {
        /// Dataset directory or its manifest.json.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Diffusion checkpoint file or the directory holding diffusion.ckpt.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Feature variants (repeatable); `all` selects every variant.
        #[arg(long = "variant", value_name = "NAME")]
        variants: Vec<String>,
        /// Image sides (repeatable): edit, orig.
        #[arg(long = "side")]
        sides: Vec<Side>,
        /// Splits to process (repeatable): train, val, test.
        #[arg(long = "split")]
        splits: Vec<Split>,
        #[arg(long)]
        n_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the segmentation network with the mask loss.
    Train {
        /// Dataset directory or its manifest.json.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        features: PathBuf,
        /// Run directory; receives best.ckpt, last.ckpt and the logs.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from out/last.ckpt if present.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: finetune a stage-1 checkpoint with the relevance loss added.
    Finetune {
        /// Stage-1 checkpoint file or run directory (best.ckpt is used).
        #[arg(long, value_name = "PATH")]
        from: PathBuf,
        /// Dataset directory or its manifest.json.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        features: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on one split and write a JSON report.
    Eval {
        /// Checkpoint file or run directory (best.ckpt is used).
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory or its manifest.json.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        features: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        /// Also write the histogram of predictions on original images (CSV).
        /// Needs orig-side features for the split.
        #[arg(long, value_name = "FILE")]
        histogram: Option<PathBuf>,
        /// Also write a PNG grid of original | edited | truth | prediction rows.
        #[arg(long, value_name = "FILE")]
        overlays: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict an edit mask for a single PNG image.
    Predict {
        /// Segmentation checkpoint file or run directory (best.ckpt is used).
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Diffusion checkpoint used to build the feature stack.
        #[arg(long, value_name = "PATH")]
        diffusion: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Output mask, 8-bit grayscale PNG.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Expected feature variant; must match the checkpoint.
        #[arg(long)]
        variant: Option<Variant>,
        /// Also write an image | mask side-by-side PNG.
        #[arg(long, value_name = "FILE")]
        overlay: Option<PathBuf>,
        /// Inversion steps; should match the steps used for the training features.
        #[arg(long)]
        n_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and score every partial feature stack, or the attention baseline.
    Ablate {
        /// Dataset directory or its manifest.json.
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        features: PathBuf,
        /// Comparison table (CSV); a Markdown copy is written next to it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Directory for the per-row training runs (default: `<out>.runs`).
        #[arg(long, value_name = "DIR")]
        runs: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Compare the plain U-Net with the attention U-Net on the configured
        /// variant instead of running the variant matrix.
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_CONFIG })
        }
    }
}
