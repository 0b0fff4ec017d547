//! The `embcodec` command-line tool.
//!
//! Every command reads its settings from flags, then from an optional flat
//! config file (`--config`), then from built-in defaults. Artifacts go to
//! files, summaries to standard output, progress to standard error.

mod commands;
pub mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::{cmd_compress, cmd_decompress, cmd_gen_data, cmd_probe, cmd_sweep, cmd_train};
pub use config::ConfigFile;
pub use manifest::RunManifest;

/// Environment variable consulted for `--seed` when neither the flag nor the
/// config file sets it.
pub const SEED_ENV: &str = "EMBCODEC_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] embcodec::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into().display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        use embcodec::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } | CliError::Core(E::Io(_)) => "io",
            CliError::Json(_) => "json",
            CliError::Core(e) => match e {
                E::Dimension(_) => "dimension",
                E::Domain(_) => "domain",
                E::Index { .. } => "index",
                E::Numeric(_) => "numeric",
                E::Range(_) => "range",
                E::Format { .. } => "format",
                E::Corruption(_) => "corruption",
                E::DegenerateInput(_) => "degenerate-input",
                E::Training { .. } => "training",
                E::DegenerateTask(_) => "degenerate-task",
                E::Config(_) => "config",
                E::Io(_) => "io",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One line, `error[<kind>]: <message>`.
    pub fn render(&self) -> String {
        let text = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {text}", self.kind())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "embcodec", version, about = "Learned compression for dense embeddings")]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic three-class image task to a directory.
    GenData(GenDataArgs),
    /// Pre-train a model, or adapt one under the rate-distortion objective.
    Train(TrainArgs),
    /// Pack one input as an archive.
    Compress(CompressArgs),
    /// Unpack an archive to a tensor file.
    Decompress(DecompressArgs),
    /// Run the rate-accuracy sweep and write CSV and SVG results.
    Sweep(SweepArgs),
    /// Train a linear probe and print its held-out accuracy.
    Probe(ProbeArgs),
}

#[derive(Debug, Default, Args)]
pub struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub eval: Option<usize>,
    /// Standard deviation of additive pixel noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    /// Directory of `.tnsr` images, or a split written by `gen-data`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Checkpoint to start from instead of a fresh initialisation.
    #[arg(long, value_name = "FILE")]
    pub init: Option<String>,
    /// Train `λ·D + R` with this λ; without it, plain masked reconstruction.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub density_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// partial, none or all; defaults to partial with --init, none otherwise.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Defaults to 0 with --lambda, 0.75 otherwise.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct CompressArgs {
    /// nec, uqe or rdc.
    #[arg(long)]
    pub mode: Option<String>,
    /// Image `.tnsr` file.
    #[arg(long, value_name = "FILE")]
    pub input: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub model: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub density: Option<String>,
    /// UQE: 2..=8, f16 or f32. RDC: 8 or 16.
    #[arg(long)]
    pub bits: Option<String>,
    /// Store coder tables in the archive so it decodes without the density.
    #[arg(long)]
    pub embed_tables: bool,
    #[arg(long)]
    pub precision: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct DecompressArgs {
    #[arg(long, value_name = "FILE")]
    pub input: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<String>,
    /// Needed for NEC archives that reference their tables.
    #[arg(long, value_name = "FILE")]
    pub density: Option<String>,
}

#[derive(Debug, Default, Args)]
pub struct SweepArgs {
    /// Split written by `gen-data`; the default synthetic task otherwise.
    #[arg(long, value_name = "DIR")]
    pub data: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Explicit comma-separated λ values.
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Multiples of the calibrated λ scale, used when --lambdas is absent.
    #[arg(long)]
    pub lambda_factors: Option<String>,
    #[arg(long)]
    pub uqe_bits: Option<String>,
    #[arg(long)]
    pub rdc_bits: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    /// Skip the decoder-prefix probe on NEC points.
    #[arg(long)]
    pub no_prefix: bool,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub adapt_steps: Option<usize>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub rdc_epochs: Option<usize>,
    /// mean or attention.
    #[arg(long)]
    pub pooling: Option<String>,
    /// Count whole archives instead of payloads.
    #[arg(long)]
    pub fully_loaded: bool,
    #[arg(long)]
    pub precision: Option<u8>,
}

#[derive(Debug, Default, Args)]
pub struct ProbeArgs {
    /// Split directory with `labels.csv`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<String>,
    /// Embed the split's images with this checkpoint first; without it the
    /// tensors are taken as embeddings.
    #[arg(long, value_name = "FILE")]
    pub model: Option<String>,
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Run the decoder patch embedding and first block before pooling.
    #[arg(long)]
    pub prefix: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, &config),
        Command::Train(a) => cmd_train(a, &config),
        Command::Compress(a) => cmd_compress(a, &config).map(|line| println!("{line}")),
        Command::Decompress(a) => cmd_decompress(a, &config).map(|line| println!("{line}")),
        Command::Sweep(a) => cmd_sweep(a, &config).map(|_| ()),
        Command::Probe(a) => {
            cmd_probe(a, &config).map(|r| println!("accuracy={:.6} train_accuracy={:.6}", r.accuracy, r.train_accuracy))
        }
    }
}
