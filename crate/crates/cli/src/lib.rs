//! `lungtex` command line: synthesize data, extract patches, train the four
//! models, predict, evaluate and render heatmaps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

pub use manifest::RunManifest;

/// A problem with how the command was invoked, as opposed to with its inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "lungtex", version, about = "Cascade CNN texture classification of lung CT patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic annotated dataset.
    Synth(SynthArgs),
    /// Cut a dataset into labeled context patches, split by slice into train/ and test/.
    Extract(ExtractArgs),
    /// Train the binary healthy-vs-disease detector.
    TrainDetector(TrainArgs),
    /// Train the 4-class disease scorer on diseased patches.
    TrainScorer(TrainArgs),
    /// Train the direct 5-class baseline.
    TrainDirect(TrainArgs),
    /// Train the random-forest baseline on handcrafted features.
    TrainRf(TrainArgs),
    /// Train the weak-label heatmap U-net.
    TrainHeatmap(TrainArgs),
    /// Predict a patch store with a cascade (two models), a direct net or a forest.
    Predict(PredictArgs),
    /// Compare predictions with the patch store labels.
    Evaluate(EvaluateArgs),
    /// Render the slice heatmap of one slice.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of slices (the last ones) held out as the test split.
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Patch store to train on.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Model directory; give two (detector and scorer, any order) for the cascade.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Detector score at which the cascade hands a patch to the scorer.
    #[arg(long, default_value_t = lungtex::eval::DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Patch store holding the ground truth.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory (as written by `synth`).
    #[arg(long)]
    dataset: PathBuf,
    /// Slice id; defaults to the first slice of the dataset.
    #[arg(long)]
    slice: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Percentile of nonzero heatmap values kept in the thresholded mask.
    #[arg(long, default_value_t = 90.0)]
    percentile: f64,
}

/// Runs one command line (`argv[0]` is the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Extract(a) => commands::extract(a),
        Command::TrainDetector(a) => commands::train_texture(lungtex::recipe::Role::Detector, a),
        Command::TrainScorer(a) => commands::train_texture(lungtex::recipe::Role::Scorer, a),
        Command::TrainDirect(a) => commands::train_texture(lungtex::recipe::Role::Direct, a),
        Command::TrainRf(a) => commands::train_rf(a),
        Command::TrainHeatmap(a) => commands::train_heatmap(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Heatmap(a) => commands::heatmap(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                1
            } else {
                2
            }
        }
    }
}

/// `a: b: c`, skipping causes whose text the previous message already quotes.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}
