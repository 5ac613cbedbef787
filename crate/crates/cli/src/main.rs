use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod jobs;
mod manifest;

use commands::{EvalArgs, ExportArgs, PretrainArgs};

#[derive(Parser)]
#[command(name = "viewcraft", version = manifest::CODE_VERSION, about = "Learned-view contrastive pretraining and evaluation")]
struct Cli {
    /// Root for relative dataset paths.
    #[arg(long, env = "VIEWCRAFT_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct EvalFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the linear-evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

impl From<EvalFlags> for EvalArgs {
    fn from(f: EvalFlags) -> Self {
        EvalArgs { checkpoint: f.checkpoint, config: f.config, seed: f.seed, out: f.out, dry_run: f.dry_run }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining; writes checkpoints and metrics under OUT/RUN_ID.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Step directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Linear evaluation of a frozen checkpoint.
    Transfer(EvalFlags),
    /// Scores a trained probe on corrupted validation inputs.
    Robustness {
        #[command(flatten)]
        flags: EvalFlags,
        /// Probe written by `transfer`.
        #[arg(long)]
        probe: PathBuf,
    },
    /// Supervised-from-scratch versus pretrained linear probe on a few labeled subjects.
    Semisup {
        #[command(flatten)]
        flags: EvalFlags,
        /// Labeled subject (repeatable); overrides the config's list.
        #[arg(long = "subject")]
        subjects: Vec<String>,
    },
    /// Renders 3×3 view grids (PPM) from a checkpoint's viewmaker.
    ExportViews {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGM/PPM or .safetensors inputs; defaults to the run's validation split.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Channel drawn in difference maps of spectral inputs.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Builds a dataset whose quadrants come from other images.
    MakeCorners {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Checks that every quadrant of a corners dataset traces to a source image.
    AuditCorners {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        derived: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let root = cli.data_dir.as_deref();
    match cli.command {
        Command::Pretrain { config, seed, out, resume, dry_run } => {
            commands::pretrain(PretrainArgs { config, seed, out, resume, dry_run }, root)?;
        }
        Command::Transfer(flags) => {
            commands::transfer(flags.into(), root)?;
        }
        Command::Robustness { flags, probe } => {
            commands::robustness(flags.into(), &probe, root)?;
        }
        Command::Semisup { flags, subjects } => {
            commands::semisup(flags.into(), subjects, root)?;
        }
        Command::ExportViews { checkpoint, inputs, count, channel, seed, out } => {
            commands::export_views(ExportArgs { checkpoint, inputs, count, channel, seed, out }, root)?;
        }
        Command::MakeCorners { input, out, seed, split } => {
            commands::make_corners(&input, &out, seed, &split)?;
        }
        Command::AuditCorners { source, derived, split } => return commands::audit(&source, &derived, &split),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
