use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{AugmentFile, RunConfig};

/// Deep multi-instance learning for whole-image classification.
#[derive(Debug, Parser)]
#[command(name = "deepmil", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (PGM images, labels.csv, boxes.csv).
    Synth(SynthArgs),
    /// Train on one split and write the best-validation checkpoint.
    Train(TrainArgs),
    /// K-fold cross-validation with per-fold and aggregate metrics.
    Cv(CvArgs),
    /// Patch probability map of one image.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    #[arg(long, default_value_t = 0.5)]
    pub pos_frac: f64,
    /// Mean mass area as a fraction of the image.
    #[arg(long, default_value_t = 0.02)]
    pub mass_frac: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Flags shared by `train` and `cv`. Anything left unset comes from the
/// config file, then from the scheme defaults.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// maxpool, labelassign or sparse.
    #[arg(long)]
    pub loss: Option<String>,
    /// tiny or alexnet-conv.
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Patches that inherit a positive label (labelassign).
    #[arg(long)]
    pub k: Option<usize>,
    /// Epochs over which labelassign shrinks k to its target; 0 disables.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub max_shift_frac: Option<f64>,
    #[arg(long)]
    pub max_rotate_deg: Option<f64>,
    /// Cutout square side at 227x227 input, scaled to the preset; 0 disables.
    #[arg(long)]
    pub cutout_side: Option<usize>,
}

impl RunArgs {
    pub fn flags(&self, out: Option<PathBuf>, folds: Option<usize>) -> RunConfig {
        let augment = AugmentFile {
            flip_prob: self.flip_prob,
            max_shift_frac: self.max_shift_frac,
            max_rotate_deg: self.max_rotate_deg,
            cutout_side: self.cutout_side,
        };
        RunConfig {
            data: self.data.clone(),
            out,
            loss: self.loss.clone(),
            preset: self.preset.clone(),
            lambda: self.lambda,
            mu: self.mu,
            k: self.k,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            folds,
            augment: (augment != AugmentFile::default()).then_some(augment),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint path; the history goes next to it as `<stem>.history.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Output directory for metrics.csv, predictions.csv and fold checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// P5 image; it is cropped and resized like the training data.
    #[arg(long)]
    pub image: PathBuf,
    /// Output prefix for `<PREFIX>.pgm` and `<PREFIX>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone preset; inferred from the checkpoint when omitted.
    #[arg(long)]
    pub preset: Option<String>,
}
