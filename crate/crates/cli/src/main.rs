//! `usat`: synthetic data, pairing, pre-training, fine-tuning, evaluation and
//! visualisation from one executable.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

mod commands;
mod config;
mod pnm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use usat::encodings::GroupIndexMode;
use usat::{GeometryConfig, Preset, UsatError};

use crate::config::CliConfig;

#[derive(Debug, Parser)]
#[command(name = "usat", version, about = "USat multi-sensor encoder and masked-autoencoder pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeometryPreset {
    Usatlas,
    Desk,
}

impl GeometryPreset {
    pub fn build(self) -> GeometryConfig {
        match self {
            Self::Usatlas => GeometryConfig::usatlas(),
            Self::Desk => GeometryConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Tiny,
    Vitl,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::Vitl => Preset::Vitl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IndexModeArg {
    Pretrain,
    Finetune,
}

impl From<IndexModeArg> for GroupIndexMode {
    fn from(m: IndexModeArg) -> Self {
        match m {
            IndexModeArg::Pretrain => GroupIndexMode::Pretrain,
            IndexModeArg::Finetune => GroupIndexMode::Finetune,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config with sections {geometry, encodings, model, run, data}
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed for every random draw
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset store directory
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Comma-separated band names, bare (Red) or qualified (sentinel2/Red)
    #[arg(long, global = true, value_delimiter = ',')]
    pub bands: Option<Vec<String>>,
    /// Comma-separated sensor names
    #[arg(long, global = true, value_delimiter = ',')]
    pub sensors: Option<Vec<String>>,
    /// Fraction of patches masked per spectral group
    #[arg(long, global = true)]
    pub mask_ratio: Option<f64>,
    /// Training epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Samples per optimizer step
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Base learning rate
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Stop after this many optimizer steps
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    /// Model size
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    /// Built-in geometry, replacing the config file's
    #[arg(long, global = true, value_enum)]
    pub geometry: Option<GeometryPreset>,
    /// Group-encoding index: pre-training group id, or rank among the groups present
    #[arg(long, global = true, value_enum)]
    pub group_index_mode: Option<IndexModeArg>,
    /// Threads for data preparation and per-sample passes
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-sensor dataset store
    Synth {
        /// Number of samples
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pair fine-sensor records with containing coarse-sensor records
    Pair {
        /// Store holding the fine (high-resolution) records
        #[arg(long, value_name = "DIR")]
        fine: PathBuf,
        /// Store holding the coarse records
        #[arg(long, value_name = "DIR")]
        coarse: PathBuf,
        #[arg(long, default_value = "naip")]
        fine_sensor: String,
        #[arg(long, default_value = "sentinel2")]
        coarse_sensor: String,
    },
    /// Masked-autoencoder pre-training; writes a checkpoint and step log
    Pretrain,
    /// Multi-label fine-tuning from a checkpoint, or from random init without one
    Finetune {
        #[arg(long, value_name = "DIR")]
        ckpt: Option<PathBuf>,
        /// Train only the classifier on frozen features
        #[arg(long)]
        linear_probe: bool,
    },
    /// Micro/macro AP of a checkpoint on a dataset split
    Evaluate {
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Masked / predicted / true image triptychs as PGM or PPM
    Reconstruct {
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Number of samples to render
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Cosine-similarity maps of one group's positional encodings against the reference grid
    Encviz {
        /// Take model settings and geometry from a checkpoint
        #[arg(long, value_name = "DIR")]
        ckpt: Option<PathBuf>,
        /// Spectral group id (default: the group with the fewest patches)
        #[arg(long)]
        group: Option<usize>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<UsatError> for Failure {
    fn from(e: UsatError) -> Self {
        match e {
            UsatError::Io(_) | UsatError::NonFinite(_) | UsatError::Format(_) | UsatError::Json(_) => {
                Failure::Runtime(e.to_string())
            }
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("USAT_LOG", "info"))
        .format_timestamp(None)
        .format_target(false)
        .init();

    let config = match CliConfig::load(cli.common.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("expected a document of this shape (defaults shown):");
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&CliConfig::default()).expect("default config serializes")
            );
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.common.workers.or(Some(config.data.workers)).filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match commands::run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
