//! `avtopo`: synthetic data, training, evaluation, metrics and ablations for
//! topology-aware artery/vein segmentation.

mod commands;
mod plots;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "avtopo", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic vessel trees with exact topology sidecars.
    Synth(SynthArgs),
    /// Train a network and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Score prediction masks against ground-truth masks.
    Metrics(MetricsArgs),
    /// Train several configuration variants and tabulate their metrics.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Output dataset directory (images/ and masks/ are created inside).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub count: usize,
    /// Seed of the first sample; sample i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Canvas side, pixels.
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
    /// Number of root vessels (alternating artery, vein).
    #[arg(long, default_value_t = 2)]
    pub roots: usize,
    /// Bifurcation levels below each root.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Smallest root stroke diameter.
    #[arg(long, default_value_t = 2.0)]
    pub width_min: f64,
    /// Largest root stroke diameter.
    #[arg(long, default_value_t = 3.0)]
    pub width_max: f64,
    /// Smallest branch angle, degrees.
    #[arg(long, default_value_t = 25.0)]
    pub angle_min: f64,
    /// Largest branch angle, degrees.
    #[arg(long, default_value_t = 50.0)]
    pub angle_max: f64,
    /// Shortest root segment.
    #[arg(long, default_value_t = 14.0)]
    pub length_min: f64,
    /// Longest root segment.
    #[arg(long, default_value_t = 20.0)]
    pub length_max: f64,
    /// Peak midpoint displacement, pixels.
    #[arg(long, default_value_t = 1.0)]
    pub tortuosity: f64,
    /// Stretches per image where a vessel fades out (masks stay intact).
    #[arg(long, default_value_t = 0)]
    pub faint_gaps: usize,
    /// Standard deviation of additive image noise.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Run configuration (TOML). Missing keys take the defaults listed below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides `data.root` from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long, required_unless_present = "print_config")]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Clone)]
pub struct Tolerances {
    /// Binarization threshold for predicted probabilities.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Junction matching radius, pixels.
    #[arg(long, default_value_t = 3.0)]
    pub junction_tol: f64,
    /// Skeleton matching radius, pixels.
    #[arg(long, default_value_t = 2.0)]
    pub skel_tol: f64,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Checkpoint file; its `.json` sidecar must sit next to it.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path; the CSV is written beside it.
    #[arg(long)]
    pub report: PathBuf,
    /// Also write overlay images and a metrics bar chart.
    #[arg(long)]
    pub plots: bool,
    /// Which part of the checkpoint's split to score.
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,
    /// Images per forward pass.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[command(flatten)]
    pub tol: Tolerances,
}

#[derive(Args, Debug, Clone)]
pub struct MetricsArgs {
    /// Prediction directory (masks/<id>_artery.png, masks/<id>_vein.png).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON report path; the CSV is written beside it.
    #[arg(long)]
    pub report: PathBuf,
    /// Junction matching radius, pixels.
    #[arg(long, default_value_t = 3.0)]
    pub junction_tol: f64,
    /// Skeleton matching radius, pixels.
    #[arg(long, default_value_t = 2.0)]
    pub skel_tol: f64,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    /// Base run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Variants file: one `[[variant]]` table per variant.
    #[arg(long)]
    pub variants: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; overrides `data.root` from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Bad flags, files or settings: exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<avtopo::Error>() {
            if matches!(e, avtopo::Error::Config(_) | avtopo::Error::TomlDe(_)) {
                return 1;
            }
        }
    }
    2
}

fn command() -> clap::Command {
    let defaults = avtopo::config::RunConfig::default()
        .to_toml_string()
        .unwrap_or_default();
    Cli::command().mut_subcommand("train", |c| {
        c.after_long_help(format!("Configuration defaults:\n\n{defaults}"))
            .after_help("Run with --help to list every configuration default, or --print-config to print them as TOML.")
    })
}

fn main() -> ExitCode {
    let cli = match command()
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Metrics(a) => commands::metrics(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
