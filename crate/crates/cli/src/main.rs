mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xfactors::model::Arch;

use config::Ablation;

/// Exit code 1: bad flags, config or inputs. Exit code 2: failures while
/// running (numeric blow-ups, I/O).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "xfactors", version, about = "Supervised factor disentanglement with split latent spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (data seed for `generate`, training seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a MiniSprites dataset to an .xfds file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "minisprites.xfds")]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, log CSV and manifest into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset file, overriding the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint; writes report.json and importance.csv into --out.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Number of repeated metric evaluations.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Swap factor subspaces from targets into sources; writes a PPM mosaic.
    Swap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Source sample indices, comma separated; one mosaic column each.
        #[arg(long, value_delimiter = ',', required = true)]
        src: Vec<usize>,
        /// Target sample indices, paired with --src.
        #[arg(long, value_delimiter = ',', required = true)]
        tgt: Vec<usize>,
        /// Factor subspaces to swap, one mosaic row each; all when omitted.
        #[arg(long, value_delimiter = ',')]
        factors: Option<Vec<usize>>,
        #[arg(long, default_value = "swap.ppm")]
        out: PathBuf,
    },
    /// Train and score a grid over dim_s and beta_t; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 32, 126])]
        dim_s: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0f64, 100.0])]
        beta_t: Vec<f64>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Metric repetitions per cell.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Scatter grid of every subspace colored by every factor, plus a CSV.
    PlotLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "latents")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum ArchArg {
    Mlp,
    Conv,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Mlp => Arch::Mlp,
            ArchArg::Conv => Arch::Conv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

fn precision() -> Result<Precision, CliError> {
    match std::env::var("XFACTORS_PRECISION").as_deref() {
        Err(_) | Ok("f64") => Ok(Precision::F64),
        Ok("f32") => Ok(Precision::F32),
        Ok(other) => Err(CliError::Usage(format!("XFACTORS_PRECISION must be f32 or f64, got {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let p = precision()?;
    macro_rules! dispatch {
        ($f:ident($($arg:expr),*)) => {
            match p {
                Precision::F32 => commands::$f::<f32>($($arg),*),
                Precision::F64 => commands::$f::<f64>($($arg),*),
            }
        };
    }
    match cli.command {
        Command::Generate { common, out } => commands::generate(&common.config, common.seed, &out),
        Command::Train {
            common,
            out,
            ablate,
            arch,
            epochs,
            dataset,
            resume,
        } => {
            let o = config::Overrides {
                seed: common.seed,
                epochs,
                arch: arch.map(Arch::from),
                ablate,
            };
            dispatch!(train(&common.config, &o, dataset.as_deref(), resume.as_deref(), &out))
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            seeds,
            out,
        } => dispatch!(eval(&common.config, &checkpoint, dataset.as_deref(), seeds, common.seed, &out)),
        Command::Swap {
            common,
            checkpoint,
            dataset,
            src,
            tgt,
            factors,
            out,
        } => dispatch!(swap(
            &common.config,
            &checkpoint,
            dataset.as_deref(),
            &src,
            &tgt,
            factors.as_deref(),
            &out
        )),
        Command::Sweep {
            common,
            dim_s,
            beta_t,
            jobs,
            arch,
            epochs,
            seeds,
            out,
        } => {
            let grid = commands::SweepGrid {
                dim_s,
                beta_t,
                jobs,
                seeds,
                overrides: config::Overrides {
                    seed: common.seed,
                    epochs,
                    arch: arch.map(Arch::from),
                    ablate: None,
                },
            };
            dispatch!(sweep(&common.config, &grid, &out))
        }
        Command::PlotLatents {
            common,
            checkpoint,
            dataset,
            out,
        } => dispatch!(plot_latents(&common.config, &checkpoint, dataset.as_deref(), &out)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
