//! Operator surface for the engine: dataset construction, value training,
//! guided search and baselines, step-size sweeps, hallucination
//! evaluation, SFT export, and the simulation oracle suites.
//!
//! Configuration is one JSON file plus command-line overrides
//! (flag > file > default). Every command honors the global seed and, under
//! the simulator backend, produces byte-identical outputs across reruns.
//!
//! Exit codes: 0 success, 2 usage/config, 3 provider failure, 4 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;

use config::SimSuite;

#[derive(Debug)]
pub enum CliErrorKind {
    Config,
    Provider,
    Numerical,
    Other,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: CliErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: CliErrorKind::Config, message: message.into() }
    }
    pub fn provider(err: impl std::fmt::Display) -> Self {
        Self { kind: CliErrorKind::Provider, message: err.to_string() }
    }
    pub fn numerical(err: impl std::fmt::Display) -> Self {
        Self { kind: CliErrorKind::Numerical, message: err.to_string() }
    }
    pub fn other(err: impl std::fmt::Display) -> Self {
        Self { kind: CliErrorKind::Other, message: err.to_string() }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            CliErrorKind::Config => 2,
            CliErrorKind::Provider => 3,
            CliErrorKind::Numerical => 4,
            CliErrorKind::Other => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

/// Routes library errors to the exit-code classes.
pub fn classify_search_error(e: farsight::search::SearchError) -> CliError {
    use farsight::search::SearchError as E;
    match &e {
        E::InvalidConfig(_) | E::GuidanceMismatch { .. } => CliError::config(e.to_string()),
        E::DegeneratePolicy | E::AllResponsesEmpty => CliError::numerical(e.to_string()),
        _ => CliError::provider(e),
    }
}

#[derive(Parser)]
#[command(
    name = "farsight",
    version,
    about = "Value-guided inference-time search over stepwise image descriptions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate responses for prompt-image pairs and write the TD triplet dataset.
    BuildDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image list file: one spec per line (sim:<id>, file:<path>, url:<url>).
        #[arg(long)]
        images: Option<PathBuf>,
        /// Prompt list file, one prompt per line.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override responses generated per pair.
        #[arg(long)]
        responses_per_pair: Option<usize>,
    },
    /// Train a value head on a triplet dataset; write checkpoint and loss curve.
    TrainValue {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// tabular | linear | one-hidden-layer
        #[arg(long)]
        architecture: Option<String>,
    },
    /// Run one search and write the response plus its trace.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// sim:<id>, file:<path>, or url:<url>; defaults to the simulator's image.
        #[arg(long)]
        image: Option<String>,
        /// value | prm | greedy | bon
        #[arg(long)]
        guidance: String,
        /// Required for value guidance.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total responses for best-of-n.
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Step-size scaling sweep at one fixed temperature.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated step sizes, e.g. 2,4,8,16.
        #[arg(long, default_value = "2,4,8,16")]
        sizes: String,
        #[arg(long, default_value_t = 0.5)]
        temperature: f64,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// CHAIR hallucination metrics over a caption file.
    Evaluate {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect search traces into an SFT tuple file.
    ExportSft {
        #[arg(long)]
        traces_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise-judge two aligned SFT tuple files (requires a judge endpoint).
    Judge {
        #[arg(long)]
        config: Option<PathBuf>,
        /// SFT JSONL whose responses are side A.
        #[arg(long)]
        side_a: PathBuf,
        /// SFT JSONL whose responses are side B (aligned by line).
        #[arg(long)]
        side_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a named oracle suite and print pass/fail per property.
    Simulate {
        #[arg(long, value_enum)]
        suite: SimSuite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optionally write the generated MDP and results here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildDataset {
            config,
            images,
            prompts,
            out,
            seed,
            responses_per_pair,
        } => commands::build_dataset(config, images, prompts, out, seed, responses_per_pair),
        Command::TrainValue {
            config,
            data,
            out,
            seed,
            gamma,
            epochs,
            learning_rate,
            batch_size,
            architecture,
        } => commands::train_value(
            config,
            data,
            out,
            seed,
            gamma,
            epochs,
            learning_rate,
            batch_size,
            architecture,
        ),
        Command::Search {
            config,
            prompt,
            image,
            guidance,
            checkpoint,
            n,
            out,
            seed,
        } => commands::search(config, prompt, image, guidance, checkpoint, n, out, seed),
        Command::Sweep {
            config,
            sizes,
            temperature,
            prompt,
            image,
            checkpoint,
            out,
            seed,
        } => commands::sweep(config, sizes, temperature, prompt, image, checkpoint, out, seed),
        Command::Evaluate {
            captions,
            annotations,
            lexicon,
            out,
        } => commands::evaluate(captions, annotations, lexicon, out),
        Command::ExportSft { traces_dir, out } => commands::export_sft(traces_dir, out),
        Command::Judge {
            config,
            side_a,
            side_b,
            out,
            seed,
        } => commands::judge(config, side_a, side_b, out, seed),
        Command::Simulate { suite, seed, out } => commands::simulate(suite, seed, out),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
