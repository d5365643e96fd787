mod commands;
mod config;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cipa", version, about = "PET-CT tumour segmentation with selective state-space scans")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON run configuration; omitted sections use the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file, for `infer`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reuse a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic train/test dataset.
    Synth {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split and draw overlays.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict a mask for one PET/CT pair of TSR1 planes.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pet: PathBuf,
        #[arg(long)]
        ct: PathBuf,
    },
    /// Run every self-check suite.
    Verify {
        /// Break one component on purpose: scan, metrics or geometry.
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Time the scan kernels across sequence lengths.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stop (with a checkpoint) once this many steps are done.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub ablate_crm: bool,
    #[arg(long)]
    pub ablate_dcim: bool,
    #[arg(long)]
    pub no_augment: bool,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
