use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use decorr_core::train::Split;
use decorr_core::Precision;

use crate::commands::{cmd_corr_report, cmd_dump_features, cmd_eval, cmd_lambda_sweep, cmd_train};
use crate::config::{ExperimentConfig, Overrides, Resolved};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "decorr", version, about = "Train and inspect CNNs with a feature-decorrelation penalty")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment configuration (TOML)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root directory of downloaded datasets
    #[arg(long, global = true, env = "DECORR_DATA_DIR", value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for parameter initialization and batch order
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Floating-point precision of model and training
    #[arg(long, global = true, value_name = "f32|f64")]
    pub precision: Option<Precision>,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Suppress per-epoch progress on stderr
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics, step log, checkpoint and resolved config
    Train {
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train once per penalty weight with shared seeds and compare
    LambdaSweep {
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        lambdas: Vec<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-stage correlation statistics of a model on a dataset split
    CorrReport {
        /// Weights to load; a freshly initialized model otherwise
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stages to report (default: all)
        #[arg(long, value_delimiter = ',')]
        stages: Vec<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Dump stage activations of the first test samples
    DumpFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        stage: usize,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Also write one PGM image per sample and channel
        #[arg(long)]
        pgm: bool,
    },
    /// Evaluate a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let config = match &g.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::default(),
    };
    let mut over = Overrides {
        data_dir: g.data_dir.clone(),
        out: g.out.clone(),
        seed: g.seed,
        precision: g.precision,
        repeats: g.repeats,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Train { lambda, epochs } => {
            over.lambda = *lambda;
            over.epochs = *epochs;
            cmd_train(&Resolved::new(config, &over)?, g.quiet)?;
        }
        Command::LambdaSweep { lambdas, epochs } => {
            over.epochs = *epochs;
            cmd_lambda_sweep(&Resolved::new(config, &over)?, lambdas, g.quiet)?;
        }
        Command::CorrReport {
            checkpoint,
            stages,
            split,
        } => {
            cmd_corr_report(&Resolved::new(config, &over)?, checkpoint.as_deref(), stages, (*split).into())?;
        }
        Command::DumpFeatures {
            checkpoint,
            stage,
            samples,
            pgm,
        } => {
            cmd_dump_features(&Resolved::new(config, &over)?, checkpoint.as_deref(), *stage, *samples, *pgm)?;
        }
        Command::Eval { checkpoint, split } => {
            cmd_eval(&Resolved::new(config, &over)?, checkpoint, (*split).into())?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Usage errors map to the configuration exit code.
pub fn run_from<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli)
}
