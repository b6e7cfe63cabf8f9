use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "learnlock", version, about = "Lock and unlock the learnability of image datasets")]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, env = "LEARNLOCK_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Write the synthetic benchmark as train and test datasets.
    Generate(GenerateArgs),
    /// Craft a key and write the locked dataset.
    Craft(CraftArgs),
    /// Apply an existing key to a dataset.
    Lock(LockArgs),
    /// Invert a key on a locked dataset.
    Unlock(UnlockArgs),
    /// Train a classifier and report clean-test accuracy.
    Train(TrainArgs),
    /// Run a named experiment.
    Eval(EvalArgs),
    /// Merge experiment reports into CSV tables.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    Raw,
    Png,
}

impl From<FormatArg> for learnlock::dataset::DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Raw => Self::Raw,
            FormatArg::Png => Self::PngTree,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OutArgs {
    /// Output root; results go to key/, data/, runs/ and reports/ below it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Raw)]
    pub format: FormatArg,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 1000)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 200)]
    pub test_per_class: usize,
    /// Square image side; must be a multiple of 8.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "mini_resnet")]
    pub arch: String,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CraftArgs {
    /// Clean training dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    /// linear, conv, global-linear, global-conv or mixture:linear=1,3;conv=0,2
    #[arg(long, default_value = "linear")]
    pub transform: String,
    /// Perturbation bound on the [0,1] pixel scale (8/255 = 0.0314, 16/255 = 0.0627).
    #[arg(long, default_value_t = 16.0 / 255.0)]
    pub epsilon: f32,
    /// θ batches per round.
    #[arg(long = "I")]
    pub outer_steps: Option<usize>,
    /// ψ passes per round.
    #[arg(long = "J")]
    pub inner_passes: Option<usize>,
    /// ψ batches per round instead of full passes.
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Exit error λ.
    #[arg(long = "lambda")]
    pub exit_error: Option<f32>,
    #[arg(long)]
    pub eta_w: Option<f32>,
    #[arg(long)]
    pub eta_b: Option<f32>,
    #[arg(long)]
    pub eta_h: Option<f32>,
    #[arg(long)]
    pub theta_lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fixed-point iterations stored in conv keys.
    #[arg(long)]
    pub fixed_point_iters: Option<usize>,
    /// Channel multiplier for the conv transform network.
    #[arg(long)]
    pub h_width: Option<f32>,
    /// Restrict the lock to these classes (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<usize>,
    /// Fraction of samples to perturb, in (0, 1].
    #[arg(long)]
    pub percentage: Option<f32>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct LockArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    /// Only transform these classes (must be inside the key scope).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<usize>,
    /// Proceed when the key was crafted for a different dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct UnlockArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    /// Fixed-point iterations for conv slots (defaults to the key's value).
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    /// Global gradient-norm clip for evaluator training; 0 disables it.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f32,
    /// Seed for evaluator weight initialization.
    #[arg(long, default_value_t = 7)]
    pub init_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Clean test split.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainOpts,
    /// Training-time augmentation: none, noise, blur, standard, cutout, mixup, cutmix.
    #[arg(long, default_value = "none")]
    pub augment: String,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// triple, defenses, advtrain, uniqueness, reconstruction, sweep-epsilon, sweep-percentage
    #[arg(long)]
    pub experiment: String,
    /// Clean training dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Clean test split.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Key file; uniqueness takes two or more.
    #[arg(long)]
    pub key: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluator architectures (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "mini_resnet")]
    pub archs: Vec<String>,
    #[command(flatten)]
    pub train: TrainOpts,
    /// Images sampled by the reconstruction experiment.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// PGD iterations for adversarial training.
    #[arg(long, default_value_t = 10)]
    pub pgd_steps: usize,
    /// PGD budget; defaults to the key's epsilon.
    #[arg(long)]
    pub pgd_epsilon: Option<f32>,
    /// Sweep values in increasing order.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f32>,
    /// Transform crafted by sweeps.
    #[arg(long, default_value = "linear")]
    pub transform: String,
    /// Base epsilon for the percentage sweep.
    #[arg(long, default_value_t = 16.0 / 255.0)]
    pub epsilon: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Output root whose reports/ holds experiment JSON files.
    #[arg(long)]
    pub out: PathBuf,
}
