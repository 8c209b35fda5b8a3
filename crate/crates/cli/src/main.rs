//! `advseg` command-line tool: synthetic data, training, evaluation, sweeps
//! and confidence-map export.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "advseg", version, about = "Adversarial semi-supervised semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset as a folder of PNGs.
    GenData(GenDataArgs),
    /// Train a segmentation network, optionally with the adversarial and
    /// semi-supervised terms.
    Train(TrainArgs),
    /// Compute mean IU, prediction PNGs and selected-pixel statistics.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of one hyperparameter and several seeds.
    Sweep(SweepArgs),
    /// Export the prediction and confidence map of one image.
    Confidence(ConfidenceArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Output folder.
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of classes including background.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the dataset files of an existing folder.
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args, Clone)]
struct TrainArgs {
    /// Training dataset folder.
    #[arg(long)]
    data: PathBuf,
    /// TOML run configuration; desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Share of training images whose labels are used.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Drop both adversarial terms.
    #[arg(long)]
    no_adv: bool,
    /// Drop the semi-supervised term and train on labeled data only.
    #[arg(long)]
    no_semi: bool,
    /// Use the discriminator with a single global output.
    #[arg(long)]
    global_disc: bool,
    /// Permit the semi-supervised term without adversarial training.
    #[arg(long)]
    allow_degenerate: bool,
    /// Validation folder; when given, metrics are written after training.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Replace the artifacts of an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Run directory, checkpoint directory, or segmentation checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset folder to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Confidence thresholds for the selected-pixel report.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,1.0")]
    thresholds: Vec<f64>,
    /// Skip writing prediction PNGs.
    #[arg(long)]
    no_export: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    LambdaSemi,
    TSemi,
    LambdaAdv,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation folder used to score every grid point.
    #[arg(long)]
    val: PathBuf,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values of the swept parameter.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<f64>,
    /// Seeds per grid point; mean IU is averaged over them.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 0.125)]
    fraction: f64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct ConfidenceArgs {
    /// Run directory or checkpoint directory holding both networks.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image.
    #[arg(long)]
    image: PathBuf,
    /// Output directory for `prediction.png` and `confidence.png`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Confidence(a) => commands::confidence(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
