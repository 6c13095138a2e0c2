//! `cxr-bench`: ingest -> build-datasets -> split -> run -> report, plus
//! `validate` for the published tables and `synth` for an offline fixture.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cxr_core::{Backbone, DatasetName};

#[derive(Parser, Debug)]
#[command(
    name = "cxr-bench",
    version,
    about = "Chest X-ray transfer-learning benchmark harness"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan the source directories and write the image manifest.
    Ingest(Common),
    /// Write the three binary datasets from the manifest.
    BuildDatasets(Common),
    /// Deal each dataset into stratified folds.
    Split(Common),
    /// Train the configured grid and write metric tables.
    Run(Common),
    /// Plot training curves and write the literature comparison.
    Report(Common),
    /// Recompute the published tables from their confusion counts.
    Validate(ValidateArgs),
    /// Generate synthetic sources and a smoke-test config.
    Synth(SynthArgs),
}

/// Flags mirror config keys; a flag overrides the file.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed for fold dealing, weight init and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compute device; only "cpu" is supported. Env: CXR_DEVICE.
    #[arg(long)]
    pub device: Option<String>,
    /// Root of the COVID-19 image collection (images/ plus metadata.csv).
    #[arg(long)]
    pub covid_repo: Option<PathBuf>,
    /// Root of the ChestX-ray8 subset (images/ plus Data_Entry_2017.csv).
    #[arg(long)]
    pub chestxray8: Option<PathBuf>,
    /// Root of the pediatric pneumonia set (train/PNEUMONIA/...).
    #[arg(long)]
    pub kaggle_pneumonia: Option<PathBuf>,
    /// Keep only the first N normal images by id.
    #[arg(long)]
    pub normal_limit: Option<usize>,
    /// Comma-separated: dataset1,dataset2,dataset3.
    #[arg(long, value_delimiter = ',')]
    pub datasets: Option<Vec<DatasetName>>,
    /// Comma-separated: resnet50,resnet101,resnet152,inceptionv3,inception_resnetv2,tiny_cnn.
    #[arg(long, value_delimiter = ',')]
    pub backbones: Option<Vec<Backbone>>,
    /// Comma-separated fold indices in 1..=5.
    #[arg(long, value_delimiter = ',')]
    pub folds: Option<Vec<u8>>,
    /// Start from ImageNet weights in --weights-dir.
    #[arg(long)]
    pub pretrained: Option<bool>,
    /// Directory holding {backbone}.safetensors files.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam step size (default 1e-5).
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Dropout rate before the classifier head.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Save per-fold weights under checkpoints/.
    #[arg(long)]
    pub checkpoints: Option<bool>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fixture file to check instead of the bundled tables.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 16)]
    pub covid: usize,
    #[arg(long, default_value_t = 16)]
    pub normal: usize,
    #[arg(long, default_value_t = 16)]
    pub bacterial: usize,
    #[arg(long, default_value_t = 16)]
    pub viral: usize,
    /// Side of the generated PNG files.
    #[arg(long, default_value_t = 48)]
    pub side: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Ingest(c) => commands::ingest(&c),
        Command::BuildDatasets(c) => commands::build_datasets(&c),
        Command::Split(c) => commands::split(&c),
        Command::Run(c) => commands::run(&c),
        Command::Report(c) => commands::report(&c),
        Command::Validate(v) => commands::validate(&v),
        Command::Synth(s) => commands::synth(&s),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
