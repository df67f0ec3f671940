//! `loramix` — train, search, merge, and inspect elastic transformer
//! classifiers with mixture-of-low-rank-expert adapters.
//!
//! Every subcommand takes the same `--config` file plus `--set` overrides,
//! resolves it to a fully-defaulted experiment description, and freezes that
//! resolution as `manifest.ini` in the output directory so any artifact can
//! be reproduced from the manifest alone.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::{CliError, EvalSplit};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "loramix", version, about = "elastic transformer + low-rank expert toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (INI-style sections).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value: `--set section.key=value` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        Ok(ExperimentConfig::from_file(&self.config, &self.sets)?)
    }
}

#[derive(Args)]
struct CkptArg {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint to start from (defaults to the standard artifact
    /// in the output directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    common: Common,
    /// Subnet to merge, in canonical `v:e:[n,m;...]` form.
    #[arg(long)]
    subnet: String,
    /// Expert checkpoint to merge from (default: `mole.tlra` in the
    /// output directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where to write the merged standalone checkpoint
    /// (default: `merged.tlra` in the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Subnet to evaluate, in canonical `v:e:[n,m;...]` form.
    #[arg(long)]
    subnet: String,
    /// Which portion of the dataset to score.
    #[arg(long, value_enum, default_value = "val")]
    split: EvalSplit,
    /// Optional CSV of per-sample predictions (`index,label,pred`).
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint to inspect (defaults to the standard artifact).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also train per-subnet baselines and write `accuracy_table.csv`
    /// (slow: trains one independent model per probe subnet).
    #[arg(long)]
    accuracy: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the weight-entangled supernet from scratch.
    Pretrain(Common),
    /// Attach experts + router to a frozen supernet and train them
    /// (or fine-tune the whole model when `mole.mode = none`).
    TrainMole(CkptArg),
    /// Evolutionary subnet search under resource constraints.
    Search(CkptArg),
    /// Exhaustively rank every subnet (small spaces only).
    Bruteforce(CkptArg),
    /// Merge expert terms into plain weights for one subnet.
    Merge(MergeArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Feature/expert similarity, router assignments, and mixtures.
    Probe(ProbeArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Pretrain(c) => commands::cmd_pretrain(&c.resolve()?),
        Cmd::TrainMole(a) => commands::cmd_train_mole(&a.common.resolve()?, a.checkpoint),
        Cmd::Search(a) => commands::cmd_search(&a.common.resolve()?, a.checkpoint),
        Cmd::Bruteforce(a) => commands::cmd_bruteforce(&a.common.resolve()?, a.checkpoint),
        Cmd::Merge(a) => commands::cmd_merge(
            &a.common.resolve()?,
            &a.subnet,
            a.checkpoint,
            a.out,
        ),
        Cmd::Eval(a) => commands::cmd_eval(
            &a.common.resolve()?,
            &a.checkpoint,
            &a.subnet,
            a.split,
            a.predictions,
        ),
        Cmd::Probe(a) => commands::cmd_probe(&a.common.resolve()?, a.checkpoint, a.accuracy),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
