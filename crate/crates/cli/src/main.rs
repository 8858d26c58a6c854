mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfrnn::model::{MapPlacement, Variant};
use dfrnn::synth::Mix;

use crate::run::{exit_code, CliError};

/// Relative `--out` paths are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "DFRNN_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "dfrnn", version, about = "Decoder-fusion recurrent motion forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with a train/val split and a seed manifest.
    Generate(GenerateArgs),
    /// Train a model and write metrics.csv plus checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metric report.
    Eval(EvalArgs),
    /// Train every ablation row on one dataset and compare validation minFDE.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    /// Scenario weights, e.g. "straight=1,curve=1,t_junction=1,stopped_junction=0.5".
    #[arg(long, value_parser = str::parse::<Mix>)]
    pub mix: Option<Mix>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// TOML file with [train], [model], [kalman] and [architecture] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_wta: bool,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub no_explicit: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = str::parse::<Variant>)]
    pub variant: Option<Variant>,
    /// Where map information enters: none, encoder or decoder.
    #[arg(long, value_parser = parse_map)]
    pub map: Option<MapPlacement>,
    /// Drop both social attention layers.
    #[arg(long)]
    pub no_social: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Subdirectory of the dataset to evaluate; every scene in --data when
    /// it has no such subdirectory.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Render PNGs: observed path blue, ground truth green, modes red.
    /// Scene ids to draw; the first 8 scenes when none are given.
    #[arg(long, num_args = 0.., value_name = "SCENE_ID")]
    pub plot: Option<Vec<String>>,
    /// Also run this many stopped-at-junction probes.
    #[arg(long, default_value_t = 0)]
    pub probes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of rows; all rows by default.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<String>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, default_value_t = 0)]
    pub probes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_map(s: &str) -> Result<MapPlacement, String> {
    match s {
        "none" => Ok(MapPlacement::None),
        "encoder" => Ok(MapPlacement::Encoder),
        "decoder" => Ok(MapPlacement::Decoder),
        other => Err(format!("expected none, encoder or decoder, got {other:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result: Result<(), CliError> = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
