use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dgan::data::longtail::Scale;
use dgan_cli::commands::{self, BuildDatasetArgs, EvalArgs, TrainArgs};
use dgan_cli::{report, CliResult};

#[derive(Parser)]
#[command(name = "dgan", version, about = "Long-tailed GAN training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Paper,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Select a dataset from the source training partition.
    BuildDataset {
        /// CIFAR-10 binary directory (default: $DGAN_DATA_DIR).
        #[arg(long)]
        source: Option<PathBuf>,
        /// full, partial or imbalanced.
        #[arg(long, conflicts_with = "spec")]
        profile: Option<String>,
        #[arg(long, value_enum, default_value = "paper")]
        scale: ScaleArg,
        /// A long-tail spec as JSON instead of a profile.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Score a checkpoint and append the records to its run.
    Eval {
        /// Run directory (latest checkpoint) or a checkpoint file.
        #[arg(long)]
        run: PathBuf,
        /// Profile name or manifest path (default: the run's manifest).
        #[arg(long)]
        dataset: Option<String>,
        /// toy or reference.
        #[arg(long)]
        extractor: Option<String>,
        /// Comma-separated subset of fid, is, deviation, per-class-fid.
        #[arg(long, default_value = "fid,is")]
        metrics: String,
        #[arg(long)]
        n_gen: Option<usize>,
        #[arg(long)]
        splits: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_per_class: Option<usize>,
        /// Comma-separated class names for per-class-fid.
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        weights_sha256: Option<String>,
    },
    /// Render tables and loss plots from run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedural CIFAR-10 stand-in in the binary layout.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::BuildDataset {
            source,
            profile,
            scale,
            spec,
            seed,
            out,
        } => {
            commands::build_dataset(&BuildDatasetArgs {
                source,
                profile,
                scale: match scale {
                    ScaleArg::Paper => Scale::Paper,
                    ScaleArg::Desk => Scale::Desk,
                },
                spec,
                seed,
                out,
            })?;
        }
        Command::Train {
            config,
            out,
            resume,
            seed,
            source,
        } => {
            commands::train(&TrainArgs {
                config,
                out,
                resume,
                seed,
                source,
            })?;
        }
        Command::Eval {
            run,
            dataset,
            extractor,
            metrics,
            n_gen,
            splits,
            seed,
            n_per_class,
            classes,
            source,
            weights,
            weights_sha256,
        } => {
            commands::eval(&EvalArgs {
                run,
                dataset,
                extractor,
                metrics,
                n_gen,
                splits,
                seed,
                n_per_class,
                classes,
                source,
                weights,
                weights_sha256,
            })?;
        }
        Command::Report { runs, out } => {
            for f in report::render(&runs, &out)? {
                println!("{}", out.join(f).display());
            }
        }
        Command::MakeSynthetic { out, per_class, seed } => commands::make_synthetic(&out, per_class, seed)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
