//! `talkhead` command-line driver.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 for missing or
//! malformed data, 4 for numerical failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Lib(#[from] talkhead::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use talkhead::Error as E;
        match self {
            CliError::Config(_) | CliError::Lib(E::InvalidConfig(_)) => 2,
            CliError::Lib(E::Numerical(_)) => 4,
            CliError::Io { .. } | CliError::Lib(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "talkhead", version, about = "Audio-driven head expression synthesis")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage; overrides FACETALK_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired dataset (codes, audio, point clouds).
    GenSynthetic(GenSyntheticArgs),
    /// Train the denoiser on a dataset manifest.
    Train(TrainArgs),
    /// Generate an expression sequence for a WAV file.
    Sample(SampleArgs),
    /// Fit expression codes to a point-cloud sequence.
    Fit(FitArgs),
    /// Fit the face template to landmarks and depth views.
    TemplateFit(TemplateFitArgs),
    /// Diversity and temporal metrics of generated sequences.
    Eval(EvalArgs),
    /// Extract meshes from codes or from an analytic sphere.
    Mesh(MeshArgs),
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    records: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Points per frame in the emitted point clouds.
    #[arg(long)]
    cloud_points: Option<usize>,
    /// Also render this many frames of template-fitting data.
    #[arg(long, default_value_t = 0)]
    template_frames: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    audio: PathBuf,
    /// Output sequence file.
    #[arg(long)]
    out: PathBuf,
    /// Classifier-free guidance weight.
    #[arg(long, conflicts_with_all = ["conditional_only", "unconditional_only"])]
    guidance: Option<f64>,
    /// Use only the audio-conditioned prediction.
    #[arg(long)]
    conditional_only: bool,
    /// Use only the unconditional prediction.
    #[arg(long, conflicts_with = "conditional_only")]
    unconditional_only: bool,
    /// Directory for one OBJ per frame.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Grid resolution per axis for meshing.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Point-cloud file with its JSON sidecar.
    #[arg(long)]
    clouds: PathBuf,
    /// Dataset manifest providing the head field.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output sequence file; per-window losses go next to it as CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TemplateFitArgs {
    /// Template dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated sequence files generated for one input; repeat per
    /// input.
    #[arg(long = "set", required = true)]
    sets: Vec<String>,
    /// Report path stem; writes `.json` and `.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Mesh a sphere of this radius instead of a code sequence.
    #[arg(long, conflicts_with = "sequence")]
    sphere: Option<f64>,
    #[arg(long, required_unless_present = "sphere")]
    sequence: Option<PathBuf>,
    /// Dataset manifest providing the head field.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    grid: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let config = config::RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(config, a),
        Command::Train(a) => commands::train(config, a),
        Command::Sample(a) => commands::sample(config, a),
        Command::Fit(a) => commands::fit(config, a),
        Command::TemplateFit(a) => commands::template_fit(config, a),
        Command::Eval(a) => commands::eval(a),
        Command::Mesh(a) => commands::mesh(config, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
