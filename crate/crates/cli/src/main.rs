//! `psforge`: render synthetic photometric stereo data, train the observation-map network,
//! predict normals, run the least-squares baseline and score results.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psforge::baseline::DEFAULT_THRESHOLD;
use psforge::Error;

use crate::config::{parse_exclude, UsageError};

#[derive(Debug, Parser)]
#[command(name = "psforge", version, about = "Photometric stereo from observation maps")]
struct Cli {
    /// Master seed; overrides the seed in configuration files.
    #[arg(long, global = true, env = "PSFORGE_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the scenes of a configuration file into dataset directories.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble observation maps from labelled datasets.
    Maps {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network on labelled datasets.
    Train {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Validation datasets; default draws separate maps from the training datasets.
        #[arg(long, num_args = 1..)]
        val: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model weights file; a `.manifest` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics (default: the model path plus `.log`).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Finite-difference check of the network gradients before training.
        #[arg(long)]
        verify_gradients: bool,
    },
    /// Predict a normal map with a trained model.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Rotated copies averaged per pixel.
        #[arg(long, default_value_t = 1)]
        rotations: usize,
        /// 0-based image indices to drop, e.g. `0-19` or `0,3,5-9`.
        #[arg(long, default_value = "")]
        exclude: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shadow-thresholded Lambertian least squares.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        /// Observations at or below this value are treated as shadowed.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = "")]
        exclude: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Angular error statistics and an error-map image.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(config::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Render { config, out } => commands::render(&config, &out, cli.seed),
        Command::Maps { data, config, out } => commands::maps(&data, config.as_deref(), &out, cli.seed),
        Command::Train {
            data,
            val,
            config,
            out,
            log,
            verify_gradients,
        } => commands::train_cmd(commands::TrainArgs {
            data: &data,
            val: &val,
            config: config.as_deref(),
            out: &out,
            log: log.as_deref(),
            seed: cli.seed,
            verify_gradients,
        }),
        Command::Predict {
            data,
            model,
            rotations,
            exclude,
            out,
        } => commands::predict(commands::PredictArgs {
            data: &data,
            model: &model,
            rotations,
            exclude: &parse_exclude(&exclude)?,
            out: &out,
        }),
        Command::Baseline {
            data,
            threshold,
            exclude,
            out,
        } => commands::baseline(&data, threshold, &parse_exclude(&exclude)?, &out),
        Command::Eval { est, gt, mask, out } => commands::eval(&est, &gt, mask.as_deref(), &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
