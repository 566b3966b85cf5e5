//! `hierfuse`: corpus synthesis, training, evaluation, robustness sweeps,
//! ablations, attention export and self-checks from one binary.
//!
//! Exit status is 0 on success, 1 on a usage or configuration error and 2
//! on any runtime failure (including a failed self-check).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hierfuse::config::Profile;
use hierfuse::data::Family;
use hierfuse::eval::ablation::AblationAxis;
use hierfuse::gradsuite::Precision;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(name = "hierfuse", version, about = "Hierarchical prompt fusion for face forgery detection")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration, deep-merged over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for encoding and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, default_value = "desk")]
    pub profile: Profile,
    /// Output directory; defaults to `$HAMLET_OUT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    /// Repeatable.
    #[arg(long = "test-manifest")]
    pub test_manifests: Vec<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Prompt dropout rate.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Fusion attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Any configuration key, e.g. `--set prompts.M=8` or `--set fusion.v2t=false`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic forgery corpus (images plus JSON-lines manifest).
    Synth {
        #[arg(long)]
        family: Family,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        frames_per_video: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Manifest stem; defaults to the family name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train a detector and evaluate it on any test manifests.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint on one or more manifests; JSON report on stdout.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Frame AUC under every corruption kind and severity, as CSV.
    PerturbEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train and evaluate every cell of one or more ablation axes.
    Ablate {
        /// Comma-separated axes; all when omitted.
        #[arg(long, value_delimiter = ',')]
        axis: Vec<AblationAxis>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write per-token cross-attention maps as PGM images.
    AttnExport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Single sample to export; otherwise the first `eval.attention_samples`.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Finite-difference gradient check over random configurations.
    GradCheck {
        #[arg(long, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value_t = 12)]
        cases: usize,
    },
    /// Confirm two checkpoints carry bit-identical backbones.
    VerifyFrozen {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::PerturbEval { .. } => "perturb-eval",
            Command::Ablate { .. } => "ablate",
            Command::AttnExport { .. } => "attn-export",
            Command::GradCheck { .. } => "grad-check",
            Command::VerifyFrozen { .. } => "verify-frozen",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
