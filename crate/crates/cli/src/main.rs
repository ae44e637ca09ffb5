//! Command-line front end: simulate scenarios, train the feature models,
//! track, evaluate and run the built-in verification suite.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "trackcli", version, about = "Synthetic multi-object tracking with learned appearance features")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// TOML config. `simulate` uses it as the base config; `train` and
    /// `track` use it instead of the scenario's `config.toml`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Built-in config used when no `--config` is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,

    /// Print the full config (preset or `--config`) as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 512×512 scene, 20 targets, 200 frames, full-size models.
    Default,
    /// 128×128 scene with 6 noisy targets and a small SSFL encoder.
    Training,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scenario: ground truth, detections and signatures.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `scenario.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train SSFL or MSFL and write a checkpoint plus a per-iteration loss CSV.
    Train {
        #[arg(value_enum)]
        model: Model,
        /// Directory written by `simulate`.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the tracker over a scenario and write MOT results and diagnostics.
    Track(TrackArgs),
    /// Score a MOT results file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        res: PathBuf,
        /// IoU needed for a match.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also write `report.json` and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks, assignment and metric oracles, bank conformance.
    Verify {
        /// Also write `verify.json` and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Ssfl,
    Msfl,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("appearance").required(true).args(["oracle_embeddings", "checkpoint"]))]
pub struct TrackArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the rendered signature map as the ID-aware map.
    #[arg(long)]
    pub oracle_embeddings: bool,
    /// SSFL checkpoint from `train ssfl`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// MSFL checkpoint from `train msfl`; without it tracklet features are
    /// pooled crops.
    #[arg(long)]
    pub msfl_checkpoint: Option<PathBuf>,
    /// Skip long-term tracklet association.
    #[arg(long)]
    pub disable_msfl: bool,
    /// Detections to use instead of the scenario's `det.txt`.
    #[arg(long)]
    pub detections: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
