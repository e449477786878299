//! `train`: fit a ToyNet denoiser on a dataset directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use jointdiff::denoiser::Denoiser;
use jointdiff::negatives::{FillPolicy, NegativeConfig};
use jointdiff::schedule::{ScheduleDescriptor, DEFAULT_COSINE_OFFSET, DEFAULT_TRAIN_STEPS};
use jointdiff::synthdata::read_dataset;
use jointdiff::toynet::{load_checkpoint, save_checkpoint, ToyNet, ToyNetConfig};
use jointdiff::trainer::{LrSchedule, TrainConfig, Trainer};

use crate::config::Manifest;
use crate::{prepare_output, resolve_seed};

pub const METRICS_FILE: &str = "metrics.txt";
pub const FINAL_CHECKPOINT: &str = "final.cmck";
const METRICS_HEADER: &str = "# step, loss, loss_neg_a, loss_neg_v, n, lr";
/// Metric lines echoed to stderr when training fails.
const DIAGNOSTIC_TAIL: usize = 5;

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// key=value file of flag defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, metrics and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Start from this checkpoint and continue its step count.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Weight of the negative terms.
    #[arg(long, default_value_t = 5e-5)]
    pub eta: f64,
    /// Fraction of the run trained with eta = 0 before negatives switch on.
    #[arg(long, default_value_t = 0.5)]
    pub enable_contrastive_at: f64,
    /// Total optimizer steps, counted from zero even when resuming.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.8)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 80_000)]
    pub lr_interval: usize,
    #[arg(long, default_value_t = 2e-5)]
    pub lr_floor: f64,
    /// Cap each negative loss at this multiple of the positive loss.
    #[arg(long)]
    pub negative_clamp: Option<f64>,
    /// Negatives per modality and positive.
    #[arg(long, default_value_t = 2)]
    pub negatives: usize,
    #[arg(long, default_value_t = 2)]
    pub min_shift: usize,
    #[arg(long, default_value_t = 4)]
    pub max_shift: usize,
    /// Fill for shifted-in rows: wrap, zero or edge.
    #[arg(long, default_value = "wrap")]
    pub fill: FillPolicy,
    /// Hidden widths, comma separated.
    #[arg(long, default_value = "64")]
    pub hidden: String,
    /// Drop the time-gated input skip path.
    #[arg(long)]
    pub no_skip: bool,
    #[arg(long, default_value_t = DEFAULT_TRAIN_STEPS)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = DEFAULT_COSINE_OFFSET)]
    pub cosine_offset: f64,
    /// Save a checkpoint every this many steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_hidden(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&w| w > 0)
                .ok_or_else(|| jointdiff::Error::InvalidArgument(format!("bad hidden width `{s}`")).into())
        })
        .collect()
}

fn manifest(args: &TrainArgs, seed: u64, final_step: usize) -> Manifest {
    let mut m = Manifest::new("train");
    m.set("data", args.data.display())
        .set("out", args.out.display())
        .set_opt("init", args.init.as_ref().map(|p| p.display()))
        .set("eta", args.eta)
        .set("enable_contrastive_at", args.enable_contrastive_at)
        .set("steps", args.steps)
        .set("batch_size", args.batch_size)
        .set("lr", args.lr)
        .set("lr_decay", args.lr_decay)
        .set("lr_interval", args.lr_interval)
        .set("lr_floor", args.lr_floor)
        .set_opt("negative_clamp", args.negative_clamp)
        .set("negatives", args.negatives)
        .set("min_shift", args.min_shift)
        .set("max_shift", args.max_shift)
        .set("fill", args.fill)
        .set("hidden", &args.hidden)
        .set("no_skip", args.no_skip)
        .set("diffusion_steps", args.diffusion_steps)
        .set("cosine_offset", args.cosine_offset)
        .set("checkpoint_every", args.checkpoint_every)
        .set("seed", seed)
        .info("final_step", final_step);
    m
}

pub fn run(args: TrainArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let data = read_dataset(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let shapes = data.shapes().expect("datasets are non-empty");
    let config = TrainConfig {
        eta: args.eta,
        batch_size: args.batch_size,
        total_steps: args.steps,
        lr: LrSchedule {
            initial: args.lr,
            factor: args.lr_decay,
            interval: args.lr_interval,
            floor: args.lr_floor,
        },
        negatives: NegativeConfig {
            count: args.negatives,
            min_shift_frames: args.min_shift,
            max_shift_frames: args.max_shift,
            fill: args.fill,
        },
        seed,
        schedule: ScheduleDescriptor {
            steps: args.diffusion_steps,
            offset: args.cosine_offset,
        },
        contrastive_start: args.enable_contrastive_at,
        negative_clamp: args.negative_clamp,
        checkpoint_every: args.checkpoint_every,
        ..TrainConfig::default()
    };
    config.validate()?;

    let mut trainer = match &args.init {
        Some(path) => {
            let (net, meta) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if net.shapes() != shapes {
                return Err(jointdiff::Error::Shape(format!(
                    "checkpoint shapes {:?} do not match the dataset {:?}",
                    net.shapes(),
                    shapes
                ))
                .into());
            }
            Trainer::resume(net, config, meta.train_step)?
        }
        None => {
            let net = ToyNet::new(
                ToyNetConfig {
                    shapes,
                    hidden: parse_hidden(&args.hidden)?,
                    steps: args.diffusion_steps,
                    skip: !args.no_skip,
                },
                seed,
            );
            Trainer::new(net, config)?
        }
    };

    prepare_output(&args.out, args.force)?;
    let metrics_path = args.out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let result = trainer.run(&data.pairs, &mut metrics, Some(&args.out));
    drop(metrics);
    if let Err(e) = result {
        let text = fs::read_to_string(&metrics_path).unwrap_or_default();
        let lines: Vec<&str> = text.lines().collect();
        eprintln!("training stopped at step {}; last metrics:", trainer.step());
        for line in &lines[lines.len().saturating_sub(DIAGNOSTIC_TAIL)..] {
            eprintln!("  {line}");
        }
        return Err(e.into());
    }
    save_checkpoint(&args.out.join(FINAL_CHECKPOINT), trainer.net(), &trainer.checkpoint_meta())?;
    fs::write(args.out.join("manifest.txt"), manifest(&args, seed, trainer.step()).text())?;
    Ok(())
}
