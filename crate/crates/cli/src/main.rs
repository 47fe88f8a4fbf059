//! `psg`: corpus generation, training, evaluation and the gradient self-test.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{merge_options, ConfigFile, CountRange, Dims, List, UsageError};

#[derive(Parser, Debug)]
#[command(name = "psg", version, about = "Panoptic scene graph relation prediction")]
struct Cli {
    /// Worker threads for scene-level parallelism.
    #[arg(long, global = true, env = "PSG_THREADS")]
    threads: Option<usize>,
    /// TOML file with defaults per subcommand; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene corpus.
    Gen(GenArgs),
    /// Train a relation model (hard labels, then soft-label self-distillation).
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground truth itself) on a corpus.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter block of a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenArgs {
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Feature map size, `HxW`.
    #[arg(long)]
    pub hw: Option<Dims>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Objects per scene, `MIN..MAX`.
    #[arg(long)]
    pub objects: Option<CountRange>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub predicates: Option<usize>,
    /// Relative predicate frequencies (config file only).
    #[arg(skip)]
    pub predicate_weights: Option<Vec<f64>>,
    /// One context object per scene decides the predicate of each related pair.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub context_mode: Option<bool>,
    /// Probability that a subject also admits a second, unannotated predicate.
    #[arg(long)]
    pub ambiguity: Option<f64>,
    /// Fraction of class pairs that are related.
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Amplitude of the feature cue marking ambiguous subjects.
    #[arg(long)]
    pub cue: Option<f64>,
    /// Patch count the corpus will be tokenized with.
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the labelling rule; corpora sharing it share relations.
    #[arg(long)]
    pub rule_seed: Option<u64>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

merge_options!(GenArgs {
    scenes,
    hw,
    channels,
    objects,
    classes,
    predicates,
    predicate_weights,
    context_mode,
    ambiguity,
    density,
    noise,
    cue,
    patches,
    seed,
    rule_seed,
    output,
});

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Epochs on hard labels.
    #[arg(long)]
    pub phase1: Option<usize>,
    /// Epochs on teacher soft labels.
    #[arg(long)]
    pub phase2: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    /// EMA decay of the teacher.
    #[arg(long)]
    pub ema: Option<f64>,
    /// Focal loss focusing parameter.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Focal loss weight of positive entries.
    #[arg(long)]
    pub balance: Option<f64>,
    /// Teacher score floor for soft labels.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Zero-based epochs at which the learning rate drops 10x, e.g. `6,10`.
    #[arg(long)]
    pub milestones: Option<List>,
    /// Phase-2 loss: `focal` or `bce`.
    #[arg(long)]
    pub phase2_loss: Option<String>,
    /// Soft-label refresh: `per-step` or `per-epoch`.
    #[arg(long)]
    pub refresh: Option<String>,
    /// `global` or `pairwise`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

merge_options!(TrainArgs {
    corpus,
    phase1,
    phase2,
    lr,
    wd,
    ema,
    gamma,
    balance,
    tau,
    batch,
    milestones,
    phase2_loss,
    refresh,
    model,
    layers,
    heads,
    ffn_dim,
    head_dim,
    patches,
    seed,
    output,
});

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Comma-separated K values.
    #[arg(long)]
    pub k: Option<List>,
    /// Score the ground truth itself instead of a checkpoint.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub oracle: Option<bool>,
    /// Report file (JSON).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

merge_options!(EvalArgs {
    corpus,
    ckpt,
    k,
    oracle,
    output
});

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scale analytic gradients by 1.1 (negative control; must fail).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub corrupt: Option<bool>,
    /// Optional JSON report file.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

merge_options!(GradcheckArgs { seed, corrupt, output });

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<psg_core::Error>() {
        Some(psg_core::Error::Config(_) | psg_core::Error::Generation(_)) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let threads = cli.threads.or(file.threads);
    if let Some(t) = threads {
        if t == 0 {
            return Err(config::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match cli.command {
        Command::Gen(args) => commands::gen(args.merged_over(file.gen)),
        Command::Train(args) => commands::train(args.merged_over(file.train), threads),
        Command::Eval(args) => commands::eval(args.merged_over(file.eval)),
        Command::Gradcheck(args) => commands::gradcheck(args.merged_over(file.gradcheck)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
