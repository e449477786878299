//! `jointdiff` command-line tool: dataset generation, training, sampling and
//! evaluation.

mod config;
mod data;
mod eval;
mod sample;
mod train;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Global seed fallback when `--seed` is not given.
pub const SEED_ENV: &str = "CMMD_SEED";

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "jointdiff", version, about = "Joint video-audio diffusion experiments")]
struct Cli {
    /// Worker threads for parallel sections; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    MakeData(data::MakeDataArgs),
    /// Train a denoiser on a dataset directory.
    Train(train::TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(sample::SampleArgs),
    /// Score samples against a reference.
    Eval(eval::EvalArgs),
}

/// `--seed`, else `$CMMD_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| jointdiff::Error::InvalidArgument(format!("{SEED_ENV}=`{v}` is not an integer")).into()),
        Err(_) => Ok(0),
    }
}

/// Refuse to write into a non-empty directory unless `force` is set, in
/// which case the directory is cleared first.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(jointdiff::Error::InvalidArgument(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                ))
                .into());
            }
            std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<jointdiff::Error>()) {
        Some(jointdiff::Error::Numerical(_)) => EXIT_NUMERICAL,
        Some(jointdiff::Error::InvalidArgument(_) | jointdiff::Error::Shape(_) | jointdiff::Error::Capability(_)) => {
            EXIT_USAGE
        }
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .context("configuring the worker pool")?;
    match cli.command {
        Command::MakeData(a) => data::run(a),
        Command::Train(a) => train::run(a),
        Command::Sample(a) => sample::run(a),
        Command::Eval(a) => eval::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    // clap exits with status 2 on usage errors
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
