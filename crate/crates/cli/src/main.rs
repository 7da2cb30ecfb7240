//! `volalign`: phantom synthesis, expert pretraining, fusion fine-tuning,
//! evaluation, ablation and diagnostics from the command line.
//!
//! Exit status is 0 on success, 1 for usage or validation errors and 2
//! when a run fails.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "volalign", version, about = "Modality-aware volume/report alignment and fusion classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; unspecified keys keep their defaults
    #[arg(long, visible_alias = "spec", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `finetune.epochs=5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a phantom dataset (MVOL volumes plus manifest.json)
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Contrastively pretrain one modality's expert
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long)]
        modality: String,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
    },
    /// Fine-tune the fusion classifier
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Directory of expert checkpoints (`*.ckpt`); needed unless
        /// `finetune.ablation_flags.use_pretrained=false`
        #[arg(long, value_name = "DIR")]
        experts: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
    },
    /// Metrics of a fine-tuned checkpoint on one split
    Eval {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_name = "JSON")]
        report: PathBuf,
    },
    /// Four-row component ablation over several seeds
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        experts: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Diagnostic outputs
    Viz {
        #[command(subcommand)]
        what: Viz,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Features {
    /// pooled fusion embedding fed to the classifier head
    Fusion,
    /// channel means of the conv stream's final grid
    Conv,
}

#[derive(Subcommand, Debug)]
enum Viz {
    /// Two-dimensional t-SNE of per-record embeddings, as CSV
    Tsne {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value_t = Features::Fusion)]
        features: Features,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        /// Also render a scatter plot
        #[arg(long, value_name = "FILE")]
        png: Option<PathBuf>,
    },
    /// Class activation map of one record, as an MVOL volume
    Cam {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Record id; defaults to the first test record
        #[arg(long)]
        record: Option<String>,
        /// Target class; defaults to the record's labelled class
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, value_name = "MVOL")]
        out: PathBuf,
        /// Also render the central slices with the heatmap overlaid
        #[arg(long, value_name = "FILE")]
        png: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands as c;
    match cli.command {
        Command::Synth { cfg, out } => c::synth(&cfg, &out),
        Command::Pretrain { cfg, manifest, modality, out } => c::pretrain(&cfg, &manifest, &modality, &out),
        Command::Finetune { cfg, manifest, experts, out } => c::finetune(&cfg, &manifest, experts.as_deref(), &out),
        Command::Eval { ckpt, manifest, split, report } => c::eval(&ckpt, &manifest, &split, &report),
        Command::Ablate { cfg, manifest, experts, out } => c::ablate(&cfg, &manifest, &experts, &out),
        Command::Viz { what } => match what {
            Viz::Tsne { cfg, ckpt, manifest, split, features, out, png } => c::tsne(&cfg, &ckpt, &manifest, &split, features, &out, png.as_deref()),
            Viz::Cam { ckpt, manifest, record, class, out, png } => c::cam(&ckpt, &manifest, record.as_deref(), class, &out, png.as_deref()),
        },
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
