//! Single command-line entry point orchestrating the
//! simulate -> fit -> evaluate workflow.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "voxkin",
    version,
    about = "Voxel-wise tracer kinetic parameter estimation for dynamic PET"
)]
struct Cli {
    /// Worker threads (1 guarantees bit-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Base seed threaded to every RNG consumer (encoder, network,
    /// shuffling, phantom noise), overriding config-file seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom: dynamic volume, ground-truth maps,
    /// IDIF CSV, and a companion CT volume.
    Simulate(SimulateArgs),
    /// Train the coordinate network on a dynamic volume.
    FitInr(FitInrArgs),
    /// Per-voxel nonlinear least squares over a dynamic volume.
    FitNlls(FitNllsArgs),
    /// Error maps, segment profiles, and method comparison tables.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Phantom specification TOML; the built-in 64x64x8 four-region
    /// phantom when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's noise model with Gaussian noise at this level.
    #[arg(long)]
    noise_level: Option<f64>,
    /// Also write a seeded random foundation-feature file for the
    /// labelled voxels (stand-in for an external feature extractor).
    #[arg(long)]
    with_features: bool,
}

#[derive(Args)]
struct CommonFitArgs {
    /// Dynamic volume (.dpet).
    #[arg(long)]
    volume: PathBuf,
    /// Input function CSV (time_min,cp[,cb]).
    #[arg(long)]
    idif: PathBuf,
    /// Run configuration TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Explicit foreground mask (.mask) instead of the auto threshold.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Row label used in comparison tables.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct FitInrArgs {
    #[command(flatten)]
    common: CommonFitArgs,
    /// Encoder variant override: coords, cthu, or ctfm.
    #[arg(long)]
    variant: Option<String>,
    /// Normalized CT volume (.ct), required by the cthu variant.
    #[arg(long)]
    ct: Option<PathBuf>,
    /// Foundation features (.feat), required by the ctfm variant.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Epoch count override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size override.
    #[arg(long)]
    batch_voxels: Option<usize>,
}

#[derive(Args)]
struct FitNllsArgs {
    #[command(flatten)]
    common: CommonFitArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dynamic volume (.dpet).
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Input function CSV.
    #[arg(long)]
    idif: Option<PathBuf>,
    /// Fitted maps (.pmap).
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Checkpoint (.ckpt); inference produces the maps first.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CT volume for cthu checkpoints.
    #[arg(long)]
    ct: Option<PathBuf>,
    /// Feature file for ctfm checkpoints.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Run configuration TOML (grid step etc.).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV/PNG artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Segment endpoints `x0,y0,z0:x1,y1,z1` for a profile.
    #[arg(long)]
    segment: Option<String>,
    /// Render PNG heat maps alongside the CSV outputs.
    #[arg(long)]
    png: bool,
    /// Compare two finished run directories (reads their report.json).
    #[arg(long, value_delimiter = ',')]
    compare: Option<Vec<PathBuf>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
        {
            eprintln!("error: failed to build thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(args, cli.seed),
        Command::FitInr(args) => commands::fit_inr(args, cli.seed),
        Command::FitNlls(args) => commands::fit_nlls(args, cli.seed),
        Command::Evaluate(args) => commands::evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
