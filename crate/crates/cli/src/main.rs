//! `dfbp`: synthesize data, pre-train, fine-tune, evaluate, run the
//! ablation, sample, and self-check.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid configuration, 3 runtime
//! failure. Failures print one line to stderr:
//! `error code=<n> kind=<kind>: <message>`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser)]
#[command(name = "dfbp", version, about = "Diffusion-pretrained transformer features for score regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic face corpus (images, labels, manifest).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoising pre-training on a directory of images.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory of .pgm / .dfbp images.
        #[arg(long)]
        data: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Checkpoint to write; the loss trace goes to `<out>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a regression head on the frozen encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Head file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// k-fold cross-validation of the frozen encoder plus head.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Report CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare pre-training strategies on shared folds.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated variants (default: all three).
        #[arg(long)]
        variants: Option<String>,
        /// Pre-trained encoder for `generative-pretrained`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Pre-train on these images when no checkpoint is given.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the comparison as a `method,pcc,mae` CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ancestral sampling from a checkpoint into a PGM.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of the configured model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth { common, out } => commands::synth(&common.load()?, &out),
        Command::Pretrain { common, data, ckpt, out } => commands::pretrain(&common.load()?, &data, ckpt.as_deref(), &out),
        Command::Finetune { common, ckpt, labels, out } => commands::finetune(&common.load()?, &ckpt, &labels, &out),
        Command::Evaluate { common, ckpt, labels, out } => commands::evaluate(&common.load()?, &ckpt, &labels, out.as_deref()),
        Command::Ablation {
            common,
            labels,
            variants,
            ckpt,
            data,
            out,
        } => commands::ablation(
            &common.load()?,
            &labels,
            variants.as_deref(),
            ckpt.as_deref(),
            data.as_deref(),
            out.as_deref(),
        ),
        Command::Sample { common, ckpt, out } => commands::sample(&common.load()?, &ckpt, &out),
        Command::Gradcheck { common } => commands::gradcheck(&common.load()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => Failure::usage(e.to_string()).report(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
