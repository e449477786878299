//! `make-data`: synthetic dataset directories.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use jointdiff::denoiser::{GaussianWorld, PairShape};
use jointdiff::synthdata::{event_pairs, gaussian_pairs, write_dataset, zero_mean, DatasetKind, EventDatasetConfig};

use crate::{prepare_output, resolve_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    /// Flash and click clips with labelled event frames.
    Event,
    /// Jointly Gaussian pairs with correlated modality blocks.
    Gaussian,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct MakeDataArgs {
    /// key=value file of flag defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "event")]
    pub kind: Kind,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Clear a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Video shape `FxCxHxW`; defaults to 18x2x8x8 (event) or 1x1x2x2 (gaussian).
    #[arg(long)]
    pub video: Option<String>,
    /// Audio shape `TxC`; defaults to 112x8 (event) or 4x1 (gaussian).
    #[arg(long)]
    pub audio: Option<String>,
    /// Events per clip.
    #[arg(long, default_value_t = 3)]
    pub events: usize,
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    /// Background noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Cross-modality correlation of the gaussian kind.
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
}

pub fn parse_dims<const K: usize>(text: &str) -> Result<[usize; K]> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| jointdiff::Error::InvalidArgument(format!("bad shape `{text}`")))?;
    match <[usize; K]>::try_from(parts) {
        Ok(d) if d.iter().all(|&x| x > 0) => Ok(d),
        _ => bail!(jointdiff::Error::InvalidArgument(format!("shape `{text}` needs {K} positive sizes"))),
    }
}

pub fn run(args: MakeDataArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let (video_default, audio_default) = match args.kind {
        Kind::Event => ("18x2x8x8", "112x8"),
        Kind::Gaussian => ("1x1x2x2", "4x1"),
    };
    let video = parse_dims::<4>(args.video.as_deref().unwrap_or(video_default))?;
    let audio = parse_dims::<2>(args.audio.as_deref().unwrap_or(audio_default))?;
    prepare_output(&args.out, args.force)?;
    match args.kind {
        Kind::Event => {
            let cfg = EventDatasetConfig {
                num_items: args.items,
                video,
                audio,
                events_per_clip: args.events,
                amplitude: args.amplitude,
                noise: args.noise,
                seed,
            };
            let items = event_pairs(&cfg)?;
            let (pairs, labels): (Vec<_>, Vec<_>) = items.into_iter().map(|i| (i.pair, i.event_frames)).unzip();
            write_dataset(&args.out, &DatasetKind::Event(cfg), &pairs, &labels)?;
        }
        Kind::Gaussian => {
            let shapes = PairShape { video, audio };
            let world = GaussianWorld::correlated_blocks(
                shapes.video_len(),
                shapes.audio_len(),
                args.rho,
                zero_mean(shapes.total_len()),
            )?;
            let pairs = gaussian_pairs(&world, args.items, shapes, seed)?;
            let kind = DatasetKind::Gaussian {
                rho: args.rho,
                shapes,
                count: args.items,
                seed,
            };
            write_dataset(&args.out, &kind, &pairs, &[])?;
        }
    }
    log::info!("wrote {} items to {}", args.items, args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims::<4>("18x2x8x8").unwrap(), [18, 2, 8, 8]);
        assert!(parse_dims::<2>("18x2x8").is_err());
        assert!(parse_dims::<2>("0x2").is_err());
        assert!(parse_dims::<2>("ax2").is_err());
    }
}
