//! Command-line driver: training, evaluation, ablation suites and
//! visualization exports, each writing a run manifest next to its outputs.

pub mod ablation;
pub mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use advrf::data_eval::{generate_synthetic, load_image_folder, RetrievalDataset};
use advrf::trainer::TrainConfig;
use advrf::Error;
use clap::{Parser, Subcommand};

pub use ablation::{mean_spread, measure, run_suite, suite_rows, train_cached, RunResult, SuiteReport, SuiteRow, SUITES};
pub use commands::{cmd_eval, cmd_train, cmd_visualize, EvalArgs, EvalOutcome, VisualizeOutcome};
pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownConfigKey(_) | Error::InvalidArgument(_) | Error::Checkpoint(_) => {
            EXIT_USAGE
        }
        Error::Io { .. } | Error::Image { .. } | Error::Ingestion(_) => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Dimension { .. } | Error::ContractViolation(_) => EXIT_INTERNAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "advrf", version, about = "Adversarial reconstruction feedback for fine-grained retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, metrics and a manifest.
    Train {
        /// key=value config file (defaults to the desk_default preset).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Image-folder dataset; the synthetic dataset from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recall@K of a checkpoint using the retrieval model only.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ks: Vec<usize>,
        /// seen, unseen or all.
        #[arg(long, default_value = "unseen")]
        split: String,
        /// Output directory (defaults to `eval_<split>` beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also time a forced both-models forward as a reference.
        #[arg(long)]
        timing: bool,
    },
    /// Run an ablation suite over several seeds.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Run the suite's trainings concurrently (results are unchanged).
        #[arg(long)]
        parallel: bool,
    },
    /// Export pattern-map overlays, a similarity grid and embeddings.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of unseen images to overlay.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

/// Reads a config file, or the default preset when no path is given.
pub fn load_config(path: Option<&Path>) -> advrf::Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) if !p.is_file() => Err(Error::Config(format!("config file {} not found", p.display()))),
        Some(p) => TrainConfig::load(p),
    }
}

/// The folder dataset at `data`, or the config's synthetic dataset.
pub fn load_dataset(data: Option<&Path>, config: &TrainConfig) -> advrf::Result<RetrievalDataset> {
    match data {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::Config(format!("dataset directory {} not found", dir.display())));
            }
            let load = load_image_folder(dir)?;
            if load.skipped > 0 {
                log::warn!("skipped {} non-image files under {}", load.skipped, dir.display());
            }
            Ok(load.dataset)
        }
        None => generate_synthetic(&config.synthetic_spec()),
    }
}

fn configure_threads() -> advrf::Result<()> {
    let Ok(v) = std::env::var("ADVRF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ADVRF_THREADS must be a positive integer, got `{v}`")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> advrf::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, out, data, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_train(&cfg, data.as_deref(), &out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            data,
            ks,
            split,
            out,
            timing,
        } => {
            let args = EvalArgs {
                checkpoint,
                data,
                ks,
                split: commands::parse_split(&split)?,
                out,
                timing,
            };
            let outcome = cmd_eval(&args)?;
            print!("{}", outcome.table());
            Ok(())
        }
        Command::Ablate {
            suite,
            out,
            config,
            seeds,
            parallel,
        } => {
            let cfg = load_config(config.as_deref())?;
            let report = run_suite(&suite, &cfg, &seeds, &out, parallel)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Visualize {
            checkpoint,
            out,
            data,
            count,
        } => {
            let v = cmd_visualize(&checkpoint, data.as_deref(), &out, count)?;
            println!(
                "wrote {} overlay files and similarity_grid.png; dominance {:.4}",
                v.overlay_files, v.dominance
            );
            Ok(())
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
