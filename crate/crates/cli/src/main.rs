mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::ConfigError;

#[derive(Parser, Debug)]
#[command(
    name = "aec",
    version,
    about = "Neural acoustic echo cancellation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.batch_size=2` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_assignment)]
    sets: Vec<(String, Value)>,
    /// Seed for data synthesis, initialization and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print per-item progress
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a mixture dataset with its manifest
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Fixed signal-to-echo ratio in dB
        #[arg(long, allow_negative_numbers = true)]
        ser: Option<f64>,
        /// White-noise SNR in dB
        #[arg(long, allow_negative_numbers = true)]
        snr: Option<f64>,
        /// Fixed reverberation time in seconds
        #[arg(long)]
        t60: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a synthesized dataset
    Train {
        /// Dataset directory holding manifest.jsonl
        #[arg(long)]
        data: PathBuf,
        /// Fraction of items held out for validation
        #[arg(long)]
        val_fraction: f64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a saved training state
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        causal: Option<bool>,
        #[command(flatten)]
        common: Common,
    },
    /// Cancel echo in one recording offline
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Microphone recording
        #[arg(long)]
        mix: PathBuf,
        /// Loudspeaker reference
        #[arg(long)]
        far: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the attention weights as CSV
        #[arg(long)]
        save_attention: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Cancel echo hop by hop with the streaming engine
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mix: PathBuf,
        #[arg(long)]
        far: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score methods on a dataset by ERLE and PESQ
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model checkpoint; adds the model to the compared methods
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Methods to compare: identity, nlms, model
        #[arg(long, value_delimiter = ',', default_value = "identity,nlms")]
        methods: Vec<String>,
        /// External PESQ program invoked as `<scorer> +16000 <clean> <degraded>`
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump layer-attention weights for one utterance as a frame × head × layer grid
    InspectAttention {
        /// Checkpoint to load; without one the configured model is initialized from the seed
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mix: PathBuf,
        #[arg(long)]
        far: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        causal: Option<bool>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the receptive field of the configured model
    Rf {
        #[arg(long)]
        causal: Option<bool>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
