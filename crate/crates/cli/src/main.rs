//! Command-line front end for the dispatch toolkit.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dispatch", version, about = "Robust taxi dispatch under data-driven demand uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Demand samples CSV (`date,t,label,r0,...`); synthesized from the
    /// generator when absent.
    #[arg(long)]
    pub samples: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aggregate a trip CSV into demand samples and transition estimates.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Trip CSV with the columns named in the config schema.
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate synthetic demand samples.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Bootstrap box and SOC sets for every start slot and label.
    BuildSets {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Build and solve one robust (or nominal) problem and dump it.
    SolveOnce {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Start slot whose samples define the demand model.
        #[arg(long, default_value_t = 0)]
        slot: usize,
    },
    /// Receding-horizon run of the configured policy and the nonrobust baseline.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on some dates, score the configured policy and the baseline on the rest.
    CrossValidate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Cross-validate the configured robust policy over the epsilon list.
    SweepEpsilon {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Mismatch at the fairness-cost optimum over the alpha list.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        slot: usize,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { common, input } => commands::ingest(&common, &input),
        Command::Synth { common } => commands::synth(&common),
        Command::BuildSets { common, data } => commands::build_sets(&common, &data),
        Command::SolveOnce { common, data, slot } => commands::solve_once(&common, &data, slot),
        Command::Simulate { common } => commands::simulate(&common),
        Command::CrossValidate { common, data } => commands::cross_validate(&common, &data),
        Command::SweepEpsilon { common, data } => commands::sweep_epsilon(&common, &data),
        Command::SweepAlpha { common, data, slot } => commands::sweep_alpha(&common, &data, slot),
    }
}
