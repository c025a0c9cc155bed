//! Command-line front end for `emobed`.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 configuration or
//! validation failure. Log verbosity follows `EMOBED_LOG` (e.g. `info`).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use emobed::Modality;

pub mod commands;
pub mod config;

pub use commands::{DatasetArgs, SynthArgs};

pub const LOG_ENV: &str = "EMOBED_LOG";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] emobed::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Library errors that come from bad input rather than from running.
    pub(crate) fn config(e: emobed::Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(e) if is_validation(e) => 2,
            _ => 1,
        }
    }
}

fn is_validation(e: &emobed::Error) -> bool {
    use emobed::Error::*;
    match e {
        Usage(_) | Parse { .. } | Integrity(_) | Shape(_) => true,
        GridPoint { source, .. } => is_validation(source),
        _ => false,
    }
}

#[derive(Debug, Parser)]
#[command(name = "emobed", version, about = "Crossmodal emotion embedding training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `[train] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataOpts {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One or more CSV files.
    #[arg(long, required = true, num_args = 1..)]
    pub dataset: Vec<PathBuf>,
    #[arg(long)]
    pub modality: Modality,
    #[arg(long, default_value_t = 2.4)]
    pub delay_seconds: f64,
    #[arg(long, default_value_t = 25.0)]
    pub frame_rate: f64,
}

impl DataOpts {
    fn to_args(&self) -> DatasetArgs {
        DatasetArgs {
            checkpoint: self.checkpoint.clone(),
            dataset: self.dataset.clone(),
            modality: self.modality,
            delay_seconds: self.delay_seconds,
            frame_rate_hz: self.frame_rate,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a run directory.
    Train(RunArgs),
    /// Train every (alpha, beta) grid point and keep the best.
    Sweep(RunArgs),
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        data: DataOpts,
        /// Post-processing plan written by `train`.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Directory for report.csv and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-frame or per-utterance embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        data: DataOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic audiovisual train/dev CSVs.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Recordings (or utterances with --classes).
        #[arg(long, default_value_t = 10)]
        recordings: usize,
        #[arg(long, default_value_t = 2000)]
        frames: usize,
        /// How many of the recordings go to the training split.
        #[arg(long, default_value_t = 7)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        latent_dim: usize,
        #[arg(long, default_value_t = 20)]
        audio_dim: usize,
        #[arg(long, default_value_t = 30)]
        video_dim: usize,
        #[arg(long, default_value_t = 1.5)]
        noise_audio: f64,
        #[arg(long, default_value_t = 0.3)]
        noise_video: f64,
        #[arg(long, default_value_t = 25)]
        noise_smoothing: usize,
        #[arg(long, default_value_t = 0.0)]
        gold_delay_seconds: f64,
        #[arg(long)]
        classes: Option<usize>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let dir = commands::cmd_train(&a.config, a.seed, a.out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Sweep(a) => {
            let dir = commands::cmd_sweep(&a.config, a.seed, a.out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Eval { data, plan, out } => {
            let report = commands::cmd_eval(&data.to_args(), plan.as_deref(), out.as_deref())?;
            print!("{}", report.text());
        }
        Command::ExportEmbeddings { data, out } => {
            let rows = commands::cmd_export_embeddings(&data.to_args(), &out)?;
            println!("{rows} rows written to {}", out.display());
        }
        Command::GenSynth {
            out,
            seed,
            recordings,
            frames,
            train,
            latent_dim,
            audio_dim,
            video_dim,
            noise_audio,
            noise_video,
            noise_smoothing,
            gold_delay_seconds,
            classes,
        } => {
            let args = SynthArgs {
                seed,
                recordings,
                frames,
                train,
                latent_dim,
                audio_dim,
                video_dim,
                noise_audio,
                noise_video,
                noise_smoothing,
                gold_delay_seconds,
                classes,
            };
            commands::cmd_gen_synth(&args, &out)?;
        }
    }
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
