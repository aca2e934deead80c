//! `stegduel`: dataset synthesis, adversarial training, classical and learned
//! embedding, detection, evaluation and a gradient self-check.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric abort.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "stegduel", version, about = "Adversarial steganography laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic PGM dataset.
    Synth(SynthArgs),
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Run the three-player game on a PGM directory.
    Train(TrainArgs),
    /// Train the steganalyzer alone on covers and their classical stegos.
    TrainDetector(TrainDetectorArgs),
    /// Hide a message in one image.
    Embed(EmbedArgs),
    /// Recover a message from one image.
    Extract(ExtractArgs),
    /// Score every image of a directory with the steganalyzer.
    Detect(DetectArgs),
    /// Evaluate a checkpoint on a PGM directory.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every autodiff primitive.
    Gradcheck(GradcheckArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Lsb,
    Adaptive,
    Gan,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClassicalMethod {
    Lsb,
    Adaptive,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of images.
    #[arg(long, short = 'n')]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    /// Embedding rate that fixes the message length.
    #[arg(long, default_value_t = 0.1)]
    pub bpp: f64,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of training covers.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out directory for evaluation; defaults to the training set.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Output directory for checkpoint, CSV logs and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint instead of initializing.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    pub steps: u64,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub bpp: f64,
    #[arg(long, default_value_t = 0.7)]
    pub lambda_g: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_d: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_s: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Evaluate every this many steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainDetectorArgs {
    /// Directory of covers; stegos are produced with `--method`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint and replace only its steganalyzer.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClassicalMethod::Lsb)]
    pub method: ClassicalMethod,
    #[arg(long, default_value_t = 0.4)]
    pub bpp: f64,
    #[arg(long, default_value_t = 600)]
    pub steps: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Cover/stego pairs per step.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Cover image (PGM).
    #[arg(long)]
    pub input: PathBuf,
    /// Stego image to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Message as a string of 0 and 1; random at `--bpp` when omitted.
    #[arg(long)]
    pub message: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    pub bpp: f64,
    /// Seeds the random message and, for lsb/adaptive, the embedding key.
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Key file to write (lsb); defaults to `<out>.key`.
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Trained checkpoint (gan).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Stego image (PGM).
    #[arg(long)]
    pub input: PathBuf,
    /// Key file written by `embed` (lsb).
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Trained checkpoint (gan).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bits to read (gan); defaults to the decoder's full length.
    #[arg(long)]
    pub length: Option<usize>,
    /// Write the bits here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Directory of PGM images; `cover_*` and `stego_*` names carry labels.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV to write instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub bpp: f64,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// CSV to write instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per primitive.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Corrupt this primitive's backward rule (negative control).
    #[arg(long, hide = true)]
    pub faulty: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    commands::configure_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Init(a) => commands::init(&a),
        Command::Train(a) => commands::train(&a),
        Command::TrainDetector(a) => commands::train_detector(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("\nRun `stegduel --help` for usage.");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
