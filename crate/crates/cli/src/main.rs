use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phaseuq_cli::{run_demo, run_stage, CliError, Context, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "phaseuq", version, about = "Phase retrieval with calibrated uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory to create; must not exist.
    #[arg(long)]
    out: PathBuf,
    /// Replaces the master seed and every per-block seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, env = "PHASEUQ_THREADS")]
    threads: Option<usize>,
    /// Also write 16-bit PGM previews of 2D and 3D tensors.
    #[arg(long)]
    export_pgm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom, single-LED stack and the five multiplexed exposures.
    Simulate(Common),
    /// Sequential Fourier ptychographic reconstruction.
    Sfpm(Common),
    /// Two-image differential phase contrast reconstruction.
    Dpc(Common),
    /// Ground truth conditioning, noise estimate and patches.
    Preprocess(Common),
    /// Trains the ensemble (or the single dropout network).
    Train(Common),
    /// Per-member predictive maps for every patch.
    Predict(Common),
    /// Uncertainty maps, credibility, bounds and reliability diagram.
    Analyze(Common),
    /// Full-frame composites of the analysis maps.
    Stitch(Common),
    /// Whole chain on the built-in configuration (or `--config`).
    Demo(Common),
}

fn load_config(common: &Common, required: bool) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let (mut cfg, base) = match &common.config {
        Some(path) => {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (ExperimentConfig::load(path)?, base)
        }
        None if required => return Err(CliError::Config("--config is required for this subcommand".into())),
        None => (ExperimentConfig::demo(), PathBuf::from(".")),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    Ok((cfg, base))
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let (stage, common) = match &cli.command {
        Command::Simulate(c) => (Some(Stage::Simulate), c),
        Command::Sfpm(c) => (Some(Stage::Sfpm), c),
        Command::Dpc(c) => (Some(Stage::Dpc), c),
        Command::Preprocess(c) => (Some(Stage::Preprocess), c),
        Command::Train(c) => (Some(Stage::Train), c),
        Command::Predict(c) => (Some(Stage::Predict), c),
        Command::Analyze(c) => (Some(Stage::Analyze), c),
        Command::Stitch(c) => (Some(Stage::Stitch), c),
        Command::Demo(c) => (None, c),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let (cfg, base) = load_config(common, stage.is_some())?;
    match stage {
        Some(stage) => run_stage(stage, &Context { cfg, base, export_pgm: common.export_pgm }, &common.out),
        None => run_demo(cfg, &common.out, common.export_pgm),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
