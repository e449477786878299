//! `sample`: joint or conditional generation from a checkpoint.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use jointdiff::forward::{stream_rng, ModalPair};
use jointdiff::sampler::{sample_conditional, sample_joint, Condition, Direction, GuidanceSchedule, SamplerConfig};
use jointdiff::synthdata::{read_dataset, write_pairs, StoredDataset};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::Manifest;
use crate::{prepare_output, resolve_seed};

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SampleArgs {
    /// key=value file of flag defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// joint, v2a or a2v.
    #[arg(long, default_value = "joint")]
    pub direction: Direction,
    /// Reconstruction guidance weight; 0 is plain replacement.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// constant or one_minus_abar.
    #[arg(long, default_value = "constant")]
    pub lambda_schedule: GuidanceSchedule,
    /// DDIM steps.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Dataset whose items (cycled in order) condition v2a and a2v sampling.
    #[arg(long)]
    pub cond: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn run(args: SampleArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let bytes = fs::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let (net, meta) = jointdiff::toynet::read_checkpoint(&mut bytes.as_slice())
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let schedule = meta.schedule.build()?;
    let config = SamplerConfig {
        ddim_steps: args.steps,
        lambda: args.lambda,
        lambda_schedule: args.lambda_schedule,
        direction: args.direction,
        seed,
    };
    let cond: Option<StoredDataset> = match (&args.cond, args.direction) {
        (_, Direction::Joint) => None,
        (Some(dir), _) => Some(read_dataset(dir).with_context(|| format!("loading {}", dir.display()))?),
        (None, d) => {
            return Err(jointdiff::Error::InvalidArgument(format!("direction {d} needs --cond <dataset>")).into())
        }
    };

    // each sample owns RNG stream `i`, so results do not depend on the pool size
    let samples: Vec<ModalPair> = (0..args.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            match (args.direction, &cond) {
                (Direction::Joint, _) => sample_joint(&net, &schedule, &config, &mut rng),
                (Direction::VideoToAudio, Some(c)) => {
                    let x0 = c.pairs[i % c.pairs.len()].video.clone();
                    sample_conditional(&net, &Condition::video(x0, &mut rng), &schedule, &config, &mut rng)
                }
                (Direction::AudioToVideo, Some(c)) => {
                    let x0 = c.pairs[i % c.pairs.len()].audio.clone();
                    sample_conditional(&net, &Condition::audio(x0, &mut rng), &schedule, &config, &mut rng)
                }
                _ => unreachable!("conditioning data checked above"),
            }
        })
        .collect::<jointdiff::Result<_>>()?;
    let labels: Vec<Vec<usize>> = match &cond {
        Some(c) => (0..args.count).map(|i| c.labels[i % c.labels.len()].clone()).collect(),
        None => Vec::new(),
    };

    let mut m = Manifest::new("sample");
    m.set("checkpoint", args.checkpoint.display())
        .set("out", args.out.display())
        .set("direction", args.direction)
        .set("lambda", args.lambda)
        .set("lambda_schedule", args.lambda_schedule)
        .set("steps", args.steps)
        .set("count", args.count)
        .set_opt("cond", args.cond.as_ref().map(|p| p.display()))
        .set("seed", seed)
        .info("checkpoint_sha256", sha256_hex(&bytes))
        .info("train_step", meta.train_step);
    prepare_output(&args.out, args.force)?;
    write_pairs(&args.out, &samples, &labels, m.text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
