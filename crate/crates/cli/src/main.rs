//! `gmp`: build vocabularies, encode entities, train, evaluate, and
//! generate synthetic datasets.

mod commands;
mod dataset;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gmp", version, about = "Group membership prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one K-Means visual vocabulary per view.
    BuildVocab(BuildVocabArgs),
    /// Quantize inputs and write one encoded-entity file per entity.
    Encode(EncodeArgs),
    /// Train a model by alternating hinge-loss SVM solves.
    Train(TrainArgs),
    /// Rank a gallery view against a probe view and report metrics.
    Eval(EvalArgs),
    /// Generate and encode a synthetic multi-view dataset.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Copy)]
pub struct KernelArgs {
    /// Kernel window size in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub sigma: f64,
    /// Kernel cutoff distance in pixels.
    #[arg(long, default_value_t = 6.0)]
    pub alpha: f64,
    /// Location grid step in pixels.
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
}

#[derive(Args, Clone, Copy)]
pub struct ImageArgs {
    /// Images are resized to this width before feature extraction.
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Side of the square HSV patch.
    #[arg(long, default_value_t = 2)]
    pub patch: usize,
}

#[derive(Args)]
pub struct BuildVocabArgs {
    /// Directory with `view_<m>/` input folders.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of views (default: every `view_<m>` found).
    #[arg(long)]
    pub views: Option<usize>,
    /// Words per view.
    #[arg(long, default_value_t = 300)]
    pub k: usize,
    /// Features sampled per view for clustering.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub image: ImageArgs,
    /// Output directory for `vocab_view_<m>.json` and `.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Directory written by `build-vocab`.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub views: Option<usize>,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub image: ImageArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Encoded dataset directory with `labels.csv`.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional vocabulary directory to embed in the model.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub views: Option<usize>,
    /// multi-view, double-view or direct-two-view.
    #[arg(long, default_value = "multi-view")]
    pub mode: String,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda3: f64,
    /// Training tuples drawn from the labelled entities.
    #[arg(long, default_value_t = 30_000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub pos_fraction: f64,
    #[arg(long, default_value_t = 20)]
    pub max_outer: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub outer_tol: f64,
    /// Skip the scale rebalancing after each outer iteration.
    #[arg(long)]
    pub no_rebalance: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model file; the objective trace goes to `<stem>.trace.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub probe_view: usize,
    #[arg(long, default_value_t = 0)]
    pub gallery_view: usize,
    /// sum, max or auto (cross-validated) for more than two views.
    #[arg(long, default_value = "auto")]
    pub reduce: String,
    /// Verification decision threshold.
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Repeat with seeds seed, seed+1, ... and average.
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    /// Identities drawn per trial (default: all).
    #[arg(long)]
    pub gallery_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    /// Training identities.
    #[arg(long, default_value_t = 50)]
    pub identities: usize,
    #[arg(long, default_value_t = 50)]
    pub test_identities: usize,
    #[arg(long, default_value_t = 1)]
    pub images_per_entity: usize,
    #[arg(long, default_value_t = 40)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 20)]
    pub parts: usize,
    /// Words per view.
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Per-pixel word corruption probability.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Largest part displacement in pixels.
    #[arg(long, default_value_t = 1)]
    pub jitter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildVocab(a) => commands::build_vocab(&a),
        Command::Encode(a) => commands::encode(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    if let Err(e) = result {
        eprintln!("gmp: {e}");
        std::process::exit(e.exit_code());
    }
}
