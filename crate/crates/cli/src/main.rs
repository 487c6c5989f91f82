mod commands;
mod failure;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use radiogen_core::volume::Dims;
use radiogen_core::Modality;
use serde::Serialize;

use failure::{describe, USAGE};

/// Radiogenomic MGMT classification from mpMRI DICOM series.
#[derive(Debug, Parser)]
#[command(name = "radiogen", version, arg_required_else_help = true)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic DICOM dataset with a planted lesion signal.
    Synth(SynthArgs),
    /// Convert DICOM series into resized, normalized volume caches.
    Prep(PrepArgs),
    /// Train one 3D ViT for one modality.
    Train(TrainArgs),
    /// Score prepared volumes with a trained checkpoint.
    Predict(PredictArgs),
    /// Combine per-modality predictions.
    Ensemble(EnsembleArgs),
    /// AUC, ROC curve and confusion-matrix metrics.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: usize,
    /// Volume size as HxWxD.
    #[arg(long, default_value = "32x32x32")]
    pub dims: Dims,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub positive_fraction: f64,
    #[arg(long, default_value_t = 8)]
    pub lesion_side: usize,
    #[arg(long, default_value_t = 1000.0)]
    pub lesion_delta: f64,
    #[arg(long, default_value_t = 5.0)]
    pub noise_sigma: f64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PrepArgs {
    /// Dataset root laid out as <subject>/<modality>/*.dcm.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Target height and width.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Target number of slices.
    #[arg(long, default_value_t = 64)]
    pub depth: usize,
    #[arg(long, value_delimiter = ',', default_values_t = Modality::ALL)]
    pub modalities: Vec<Modality>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Output directory of `prep`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub modality: Modality,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// Height and width of the prepared volumes.
    #[arg(long, default_value_t = 256)]
    pub image_size: usize,
    #[arg(long, default_value_t = 64)]
    pub depth: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    #[arg(long, default_value_t = 0.95)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 128)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    /// Hidden width of the MLP (default: 4 x embed-dim).
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Train on the original volumes only, without the rotated copies.
    #[arg(long)]
    pub no_augment: bool,
    /// Best checkpoint; the epoch log goes to <out>.log.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory of `prep`.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the modality the checkpoint was trained on.
    #[arg(long)]
    pub modality: Option<Modality>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    Average,
    Stack,
}

#[derive(Debug, Args, Serialize)]
pub struct EnsembleArgs {
    #[arg(long, value_enum)]
    pub mode: EnsembleMode,
    /// Per-modality prediction CSVs, in the order given by --modalities.
    #[arg(long, value_delimiter = ',', required = true)]
    pub preds: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = Modality::ALL)]
    pub modalities: Vec<Modality>,
    /// Fit the stacker on these labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Stacker JSON: written after fitting, read when no labels are given.
    #[arg(long)]
    pub stacker: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub l2_lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Partition name written into the report.
    #[arg(long, default_value = "test")]
    pub split: String,
}

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

fn run_cli(argv: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
                    let _ = Cli::command().write_help(&mut std::io::stderr());
                    eprintln!("error: {USAGE}: no subcommand given");
                    2
                }
                _ => {
                    let rendered = e.to_string();
                    let first = rendered.lines().next().unwrap_or_default().trim_start_matches("error: ");
                    eprintln!("error: {USAGE}: {first}");
                    2
                }
            };
        }
    };
    init_logging(cli.quiet);
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Prep(a) => commands::prep(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Ensemble(a) => commands::ensemble(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            let (category, message) = describe(&err);
            eprintln!("error: {category}: {message}");
            if category == USAGE {
                2
            } else {
                1
            }
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run_cli(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("radiogen").chain(args.iter().copied()))
    }

    #[test]
    fn defaults_and_lists() {
        let Command::Prep(p) = parse(&["prep", "--input", "a", "--output", "b"]).unwrap().command else { panic!() };
        assert_eq!((p.size, p.depth), (256, 64));
        assert_eq!(p.modalities, Modality::ALL);
        let Command::Ensemble(e) = parse(&["ensemble", "--mode", "stack", "--preds", "a,b", "--modalities", "flair,T1w", "--out", "o"])
            .unwrap()
            .command
        else {
            panic!()
        };
        assert_eq!(e.mode, EnsembleMode::Stack);
        assert_eq!(e.preds.len(), 2);
        assert_eq!(e.modalities, [Modality::Flair, Modality::T1w]);
        let Command::Synth(s) = parse(&["synth", "--out", "o", "--subjects", "3", "--dims", "8x16x4"]).unwrap().command else { panic!() };
        assert_eq!(s.dims, Dims::new(8, 16, 4));
    }

    #[test]
    fn malformed_values_are_rejected() {
        assert!(parse(&["synth", "--out", "o", "--subjects", "3", "--dims", "8x16"]).is_err());
        assert!(parse(&["train", "--data", "d", "--labels", "l", "--modality", "T3", "--out", "o"]).is_err());
        assert!(parse(&["ensemble", "--mode", "median", "--preds", "a", "--out", "o"]).is_err());
    }

    #[test]
    fn exit_codes() {
        let args = |a: &[&str]| a.iter().map(OsString::from).collect::<Vec<_>>();
        assert_eq!(run_cli(args(&["radiogen", "nope"])), 2);
        assert_eq!(run_cli(args(&["radiogen", "--version"])), 0);
        assert_eq!(run_cli(args(&["radiogen", "-q", "eval", "--preds", "/nonexistent/p.csv", "--labels", "l", "--out-dir", "o"])), 1);
    }
}
