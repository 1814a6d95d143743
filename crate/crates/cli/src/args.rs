use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gti_core::data::DataFormat;
use gti_core::Variant;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "gti",
    version,
    about = "Multi-task sequence tagger with gated task interaction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Train one model and keep the best-dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on labelled data.
    Eval(EvalArgs),
    /// Tag token-per-line input with every task of a checkpoint.
    Predict(PredictArgs),
    /// Finite-difference audit of a tiny random model.
    Gradcheck(GradcheckArgs),
    /// Train every variant over a seed set and tabulate main-task scores.
    Ablate(AblateArgs),
    /// Write the deterministic toy corpus in CoNLL-2003 layout.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long, default_value = "conll2003")]
    pub data_format: DataFormat,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Carve this many dev sentences out of the training file when no
    /// `--dev` is given.
    #[arg(long, default_value_t = 0)]
    pub dev_split: usize,
    #[arg(long)]
    pub main: String,
    /// Comma-separated auxiliary tasks, e.g. `chunk,pos`.
    #[arg(long, value_delimiter = ',')]
    pub aux: Vec<String>,
    /// Plain-text word vectors; sets the word dimension.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub normalize_digits: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 200)]
    pub state_size: usize,
    /// Word dimension when no embeddings file is given.
    #[arg(long, default_value_t = 100)]
    pub d_word: usize,
    /// Character embedding dimension; defaults to the word dimension.
    #[arg(long)]
    pub d_char: Option<usize>,
    #[arg(long, default_value_t = 30)]
    pub char_filters: usize,
    #[arg(long, default_value_t = 3)]
    pub char_kernel: usize,
    #[arg(long, default_value_t = 50)]
    pub d_label: usize,
    /// Forbid illegal IOBES transitions in the CRF heads.
    #[arg(long)]
    pub iobes_mask: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    /// Epoch cap.
    #[arg(long, default_value_t = 70)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub alpha0: f64,
    /// Schedule length `T` in epochs.
    #[arg(long, default_value_t = 270)]
    pub schedule_epochs: usize,
    /// Number of cosine cycles `M`.
    #[arg(long, default_value_t = 9)]
    pub cycles: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.25)]
    pub dropout: f64,
    /// Clip gradients to global norm 5.
    #[arg(long)]
    pub clip: bool,
    /// Stop once the main-task score on the training set reaches this value.
    #[arg(long)]
    pub until_train_score: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value = "gti")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One token per line (extra columns are echoed), blank line between
    /// sentences.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "gti")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Skew the backward rule of this op (negative control).
    #[arg(long)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "single1,single2,vanilla,pipeline,ti,gti"
    )]
    pub variants: Vec<Variant>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub sentences: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}
