use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "stsg", version, about = "Spectrogram tokens, skip-gram embeddings and lightweight audio classifiers")]
pub struct Cli {
    /// Pipeline configuration (TOML); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every randomized stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute normalized Mel-spectrogram frames for audio clips.
    Featurize(FeaturizeArgs),
    /// Fit PCA on the training frames.
    FitPca(FitPcaArgs),
    /// Fit the k-means token codebook on PCA-reduced training frames.
    FitCodebook(FitCodebookArgs),
    /// Convert audio clips into token files.
    Tokenize(TokenizeArgs),
    /// Train skip-gram token embeddings.
    TrainEmbeddings(TrainEmbeddingsArgs),
    /// Train the classifier head on frame-averaged embeddings.
    TrainHead(TrainHeadArgs),
    /// Distill teacher logits into a convolutional student.
    Distill(DistillArgs),
    /// Per-frame top-k predictions as JSON lines.
    Predict(PredictArgs),
    /// Frame-level F1 and ROC-AUC on a labelled split.
    Eval(EvalArgs),
    /// Time end-to-end inference and project it against a budget.
    Bench(BenchArgs),
    /// Grid over embedding and vocabulary parameters.
    Sweep(SweepArgs),
}

/// Clips come from a manifest or from audio files named on the command line.
#[derive(Debug, Args)]
pub struct ClipInput {
    /// JSON-lines manifest of {clip_id, path, label, split}.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    /// WAV files; the clip id is the file stem.
    #[arg(value_name = "AUDIO")]
    pub audio: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub input: ClipInput,

    /// Writes `<clip_id>.mel.stsg` per clip.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

/// Training data: a manifest, with features precomputed by `featurize` or
/// computed from the audio when no feature directory is given.
#[derive(Debug, Args)]
pub struct ManifestFeatures {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    #[arg(long, value_name = "DIR")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitPcaArgs {
    #[command(flatten)]
    pub data: ManifestFeatures,

    #[arg(long)]
    pub k: Option<usize>,

    /// Frames sampled for the fit; 0 uses all.
    #[arg(long)]
    pub max_rows: Option<usize>,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitCodebookArgs {
    #[command(flatten)]
    pub data: ManifestFeatures,

    #[arg(long, value_name = "FILE")]
    pub pca: PathBuf,

    #[arg(long)]
    pub vocab_size: Option<usize>,

    #[arg(long)]
    pub max_iters: Option<usize>,

    /// Frames sampled for the fit; 0 uses all.
    #[arg(long)]
    pub max_rows: Option<usize>,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub input: ClipInput,

    /// Precomputed features for manifest clips.
    #[arg(long, value_name = "DIR")]
    pub features: Option<PathBuf>,

    #[arg(long, value_name = "FILE")]
    pub pca: PathBuf,

    #[arg(long, value_name = "FILE")]
    pub codebook: PathBuf,

    /// Writes `<clip_id>.stsk` per clip.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainEmbeddingsArgs {
    /// Directory of token files.
    #[arg(long, value_name = "DIR")]
    pub tokens: PathBuf,

    /// Restrict the corpus to the manifest's training split.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    #[arg(long)]
    pub vector_size: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub negative: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub ns_exponent: Option<f64>,
    #[arg(long)]
    pub sample: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    #[arg(long, value_name = "DIR")]
    pub tokens: PathBuf,

    #[arg(long, value_name = "FILE")]
    pub embeddings: PathBuf,

    #[arg(long)]
    pub hidden: Option<usize>,

    #[command(flatten)]
    pub train: TrainOverrides,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Directory of token files.
    #[arg(long, value_name = "DIR")]
    pub tokens: PathBuf,

    /// Teacher logits per frame, keyed `<clip_id>#<frame_index>`: a stored
    /// keyed matrix, or CSV with a header row and the id in the first column.
    #[arg(long, value_name = "FILE")]
    pub teacher: PathBuf,

    /// Initialize the token embedding from this SGNS table.
    #[arg(long, value_name = "FILE")]
    pub init_embeddings: Option<PathBuf>,

    #[arg(long)]
    pub temperature: Option<f64>,

    #[command(flatten)]
    pub train: TrainOverrides,

    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// The trained artifacts that make up a classifier.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_name = "FILE")]
    pub pca: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub codebook: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub embeddings: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub classifier: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub input: ClipInput,

    #[arg(long)]
    pub top_k: Option<usize>,

    /// Write JSON lines here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    #[arg(long, value_name = "DIR")]
    pub tokens: PathBuf,

    #[arg(long, value_name = "FILE")]
    pub embeddings: PathBuf,

    #[arg(long, value_name = "FILE")]
    pub classifier: PathBuf,

    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,

    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,

    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub input: ClipInput,

    /// Number of files the measured average is projected to.
    #[arg(long)]
    pub n_projection: Option<usize>,

    /// Allowed total seconds for the projected run.
    #[arg(long)]
    pub budget: Option<f64>,

    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: ManifestFeatures,

    /// `name=v1,v2,...` over vector_size, window, ns_exponent, sample or
    /// vocab_size; repeat for a grid.
    #[arg(long = "axis", value_name = "NAME=VALUES", required = true, allow_hyphen_values = true)]
    pub axes: Vec<String>,

    /// CSV output; rows are also printed to stdout.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}
