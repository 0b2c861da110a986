//! Operator surface. Exit codes: 0 ok, 2 usage/config, 3 IO, 4 numeric.

mod commands;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rtdlm_core::Error;

#[derive(Parser)]
#[command(name = "rtdlm", version, about = "Encoder/dual-decoder seq2seq pre-training with replaced token detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on monolingual corpora with span corruption.
    Pretrain {
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Corpus manifest (JSON list of {path, language_tag}); overrides the config.
        #[arg(long)]
        corpus_manifest: Option<PathBuf>,
        /// Output directory (checkpoints + metrics.jsonl).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on parallel data, optionally from a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Source side, one sentence per line.
        #[arg(long)]
        src_file: PathBuf,
        /// Target side, aligned line-by-line.
        #[arg(long)]
        trg_file: PathBuf,
        /// Checkpoint to initialize parameters from.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// G (generator only), D (discriminator only), or G+D.
        #[arg(long, default_value = "G+D")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate with the encoder + generator only.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input text, one source per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Output text file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Token-level exact match and corpus BLEU against references.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Optional artifact directory for eval.json + run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG chart of the loss curves in a metrics stream.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump one corrupted batch end to end (masking, sampling, detection,
    /// noisy context) from a fresh seeded model.
    InspectBatch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Optional artifact directory for the dump + run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument { .. } | Error::Vocab(_) | Error::ShapeMismatch { .. } => 2,
        Error::Io(_) | Error::Data(_) | Error::Json(_) | Error::Checkpoint(_) => 3,
        Error::NonFinite { .. } | Error::Graph(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, corpus_manifest, out } => commands::pretrain(&config, corpus_manifest.as_deref(), &out),
        Command::Finetune { config, src_file, trg_file, init_checkpoint, mode, out } => {
            commands::finetune(&config, &src_file, &trg_file, init_checkpoint.as_deref(), &mode, &out)
        }
        Command::Generate { checkpoint, input, beam, max_len, out } => {
            commands::generate(&checkpoint, &input, beam, max_len, &out)
        }
        Command::Eval { checkpoint, src, reference, beam, max_len, out } => {
            commands::eval(&checkpoint, &src, &reference, beam, max_len, out.as_deref())
        }
        Command::Plot { metrics, out } => commands::plot(&metrics, &out),
        Command::InspectBatch { config, corpus, seed, out } => {
            commands::inspect_batch(&config, &corpus, seed, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}
