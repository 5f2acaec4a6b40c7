mod commands;
mod error;
mod manifest;

use clap::{Parser, Subcommand};
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;
use xoffense_core::datasets::ColumnMapping;

/// Cross-lingual transfer experiments for offensive-language classification.
#[derive(Debug, Parser)]
#[command(name = "xoffense", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a BPE vocabulary from plain-text corpora (one sentence per line).
    TokenizerTrain {
        #[arg(required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep letter case instead of lowercasing during normalization.
        #[arg(long)]
        keep_case: bool,
    },
    /// Generate the synthetic bilingual benchmark.
    SynthGen {
        /// TOML spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Masked-language-model pretraining.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fine-tune a classifier with the manifest's strategy.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a checkpoint on a labeled TSV file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        id_col: usize,
        #[arg(long, default_value_t = 1)]
        text_col: usize,
        #[arg(long, default_value_t = 2)]
        label_col: usize,
    },
    /// Learning curves for scratch and the manifest's transfer strategy.
    ProgressTest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,100,200,300,400,500,600,700,800,900,1000")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TokenizerTrain {
            corpus,
            vocab_size,
            out,
            keep_case,
        } => commands::tokenizer_train(&corpus, vocab_size, !keep_case, &out),
        Command::SynthGen { spec, out_dir } => commands::synth_gen(spec.as_deref(), &out_dir),
        Command::Pretrain { manifest } => commands::pretrain(&manifest),
        Command::Train { manifest } => commands::train(&manifest),
        Command::Evaluate {
            checkpoint,
            dataset,
            tokenizer,
            out,
            id_col,
            text_col,
            label_col,
        } => commands::evaluate(commands::EvaluateArgs {
            checkpoint: &checkpoint,
            dataset: &dataset,
            tokenizer: &tokenizer,
            out: &out,
            columns: ColumnMapping {
                id: id_col,
                text: text_col,
                label: label_col,
                header: None,
            },
        }),
        Command::ProgressTest { manifest, sizes, seeds } => commands::progress_test(&manifest, &sizes, &seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
