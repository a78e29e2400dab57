use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(
    name = "gmflow",
    version,
    about = "Global-matching optical flow: train, infer, evaluate, self-test"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Seed for weight initialization; commands without randomness ignore it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic translations and write a checkpoint.
    Train(TrainArgs),
    /// Estimate flow between two PNG frames.
    Infer(InferArgs),
    /// Compare a predicted `.flo` against ground truth and print metrics as JSON.
    Eval(EvalArgs),
    /// Run the built-in verification suites.
    Selftest(SelftestArgs),
}

/// Training flags. A `--config` JSON file may supply any of them under the
/// same (kebab-case) names; flags given on the command line win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// JSON file with values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines metrics log [default: the checkpoint path with extension `jsonl`].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Transformer blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Attention windows per axis at 1/8.
    #[arg(long)]
    pub splits: Option<usize>,
    /// Enable 1/4-resolution refinement.
    #[arg(long)]
    #[serde(default)]
    pub refine: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Iterations before propagation joins the forward pass.
    #[arg(long)]
    pub propagation_warmup: Option<usize>,
    /// Maximum displacement per axis in pixels.
    #[arg(long)]
    pub max_disp: Option<i64>,
    /// Texture blur in pixels.
    #[arg(long)]
    pub blur: Option<f64>,
    /// Probability that a training sample carries an occluder.
    #[arg(long)]
    pub occluders: Option<f64>,
    /// Seed of the synthetic data stream.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub val_every: Option<usize>,
    #[arg(long)]
    pub val_samples: Option<usize>,
    #[arg(skip)]
    #[serde(default)]
    pub seed: Option<u64>,
    #[arg(skip)]
    #[serde(default)]
    pub deterministic: bool,
}

impl TrainArgs {
    /// Fills every unset field from `file`.
    pub fn merged_with(self, file: TrainArgs) -> TrainArgs {
        macro_rules! pick {
            ($($f:ident),*) => {
                TrainArgs {
                    config: self.config,
                    refine: self.refine || file.refine,
                    deterministic: self.deterministic || file.deterministic,
                    $($f: self.$f.or(file.$f),)*
                }
            };
        }
        pick!(
            out,
            log,
            resume,
            iters,
            batch,
            size,
            dim,
            blocks,
            splits,
            lr,
            weight_decay,
            propagation_warmup,
            max_disp,
            blur,
            occluders,
            data_seed,
            val_every,
            val_samples,
            seed
        )
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// First frame (PNG).
    pub image1: PathBuf,
    /// Second frame (PNG).
    pub image2: PathBuf,
    /// Forward flow output (`.flo`); sibling outputs share its stem.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write backward flow and the forward-backward occlusion mask.
    #[arg(long)]
    pub bidir: bool,
    /// Also write color-coded PNG renderings of the flow.
    #[arg(long)]
    pub viz: bool,
    /// Expected feature dimension; must match the checkpoint.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Skip flow propagation.
    #[arg(long)]
    pub no_propagation: bool,
    /// Relative term of the forward-backward occlusion threshold.
    #[arg(long, default_value_t = gmflow::matching::OCCLUSION_ALPHA)]
    pub occlusion_alpha: f64,
    /// Constant term of the forward-backward occlusion threshold, in pixels.
    #[arg(long, default_value_t = gmflow::matching::OCCLUSION_BETA)]
    pub occlusion_beta: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted flow (`.flo`).
    pub pred: PathBuf,
    /// Ground-truth flow (`.flo`).
    pub gt: PathBuf,
    /// Occlusion mask PNG; nonzero pixels count as unmatched.
    #[arg(long)]
    pub occlusion: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Quick,
    Full,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, value_enum, default_value_t = LevelArg::Quick)]
    pub level: LevelArg,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Flip the sign of the matching flow to demonstrate fault detection.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}
