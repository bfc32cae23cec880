use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod artifacts;
mod exit;
mod run;
mod tools;

#[derive(Parser, Debug)]
#[command(name = "vmflow", version, about = "Train, sample and analyse variational mean-flow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Draw samples from a trained run.
    Sample(SampleArgs),
    /// Score the samples of a run.
    Eval(EvalArgs),
    /// Dump an attention mask as ASCII, PGM and JSON.
    Mask(MaskArgs),
    /// Granger-causality tests on a pair of series or on sampled latents.
    Granger(GrangerArgs),
    /// Write a synthetic dataset as JSONL.
    GenData(GenDataArgs),
}

/// Flags that override values from the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub beta: Option<f32>,
    #[arg(long)]
    pub p_equal: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub adaptive_l2: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory to create or reuse.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint, optimizer state included.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to the run's final checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub nfe: Option<usize>,
    #[arg(long = "w")]
    pub guidance_w: Option<f32>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace every condition by the null condition.
    #[arg(long)]
    pub unconditional: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub valid_thresh: f32,
    #[arg(long, default_value_t = 0.8)]
    pub novel_thresh: f32,
    /// Also write tradeoff.csv over a threshold sweep.
    #[arg(long)]
    pub tradeoff: bool,
    /// Minimum samples near a mode for it to count as covered.
    #[arg(long, default_value_t = 10)]
    pub min_count: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[arg(long)]
    pub sample_len: usize,
    #[arg(long, default_value_t = 1)]
    pub cond_len: usize,
    #[arg(long, default_value_t = 0)]
    pub latent_len: usize,
    /// Group sizes, e.g. `9,1`. Drawn at random when absent.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.9)]
    pub decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write `<out>.txt`, `<out>.pgm` and `<out>.json`; prints ASCII otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GrangerArgs {
    /// JSON file `{"x": [...], "y": [...]}`; tests whether x causes y.
    #[arg(long, conflicts_with = "run")]
    pub series: Option<PathBuf>,
    /// Analyse the sampled latents of a run.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub max_lag: usize,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Run config whose `data` section describes the dataset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run::train(&a),
        Command::Sample(a) => run::sample(&a),
        Command::Eval(a) => run::eval(&a),
        Command::Mask(a) => tools::mask(&a),
        Command::Granger(a) => tools::granger(&a),
        Command::GenData(a) => tools::gen_data(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit::report(&e),
    }
}
