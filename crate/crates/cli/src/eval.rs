//! `eval`: alignment, distribution distances and beat hit rates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use jointdiff::audio::{beat_hit_rate, beats_of_waveform, read_wav, HitAnchor, HIT_TOLERANCE};
use jointdiff::metrics::{
    fit_gaussian, frechet_distance, kernel_distance, per_sample_frechet, EmbeddingSet, MetricReport, RandomProjection,
};
use jointdiff::synthdata::{alignment_score, read_dataset};
use jointdiff::tensor::{load_tensor, Dense, Tensor};
use rayon::prelude::*;

use crate::resolve_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    /// Event alignment of each sample pair.
    Alignment,
    /// Fréchet distance between the pooled sample and reference sets.
    Frechet,
    /// Fréchet distance of each sample against the pooled reference.
    FrechetPerSample,
    /// Unbiased polynomial-kernel MMD between the pooled sets.
    Kernel,
    /// Beat hit rate between same-named WAV files.
    Beats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmbedSource {
    /// Audio rows `(T, C_a)` through a random projection.
    Audio,
    /// Video frames flattened to `(F, C_v*H*W)` through a random projection.
    Video,
    /// Every `.cmdt` file in the directory is an `(M, d)` embedding set.
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Anchor {
    Reference,
    Generated,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// key=value file of flag defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Generated samples: a pair directory, or WAV files for `beats`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Reference set for distances and beats.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Alignment tolerance in frames.
    #[arg(long, default_value_t = 2)]
    pub tol: usize,
    /// Beat tolerance in milliseconds.
    #[arg(long, default_value_t = HIT_TOLERANCE * 1000.0)]
    pub tol_ms: f64,
    /// Which track's beats are counted.
    #[arg(long, value_enum, default_value = "reference")]
    pub anchor: Anchor,
    #[arg(long, value_enum, default_value = "audio")]
    pub embed: EmbedSource,
    /// Projection width.
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds the frozen projection.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn require_reference(args: &EvalArgs) -> Result<&Path> {
    args.reference.as_deref().ok_or_else(|| {
        jointdiff::Error::InvalidArgument(format!("metric {:?} needs --reference", args.metric)).into()
    })
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(jointdiff::Error::InvalidArgument(format!("no .{ext} files in {}", dir.display())).into());
    }
    Ok(files)
}

/// One embedding set per item of `dir`.
fn embed_dir(dir: &Path, args: &EvalArgs, seed: u64) -> Result<Vec<EmbeddingSet>> {
    if args.embed == EmbedSource::Embedding {
        return files_with_extension(dir, "cmdt")?
            .iter()
            .map(|p| Ok(EmbeddingSet::from_tensor(&load_tensor(p)?)?))
            .collect();
    }
    let data = read_dataset(dir).with_context(|| format!("loading {}", dir.display()))?;
    let rows: Vec<Tensor> = data
        .pairs
        .iter()
        .map(|p| match args.embed {
            EmbedSource::Audio => Ok(p.audio.as_tensor().clone()),
            _ => {
                let f = p.video.frames();
                p.video.as_tensor().reshape(vec![f, p.video.len() / f])
            }
        })
        .collect::<jointdiff::Result<_>>()?;
    let width = rows[0].shape()[1];
    let projection = RandomProjection::new(width, args.embed_dim, seed)?;
    rows.par_iter().map(|t| Ok(projection.embed(t)?)).collect()
}

fn pooled(sets: &[EmbeddingSet]) -> Result<EmbeddingSet> {
    let mut all = sets[0].clone();
    for s in &sets[1..] {
        all = all.concat(s)?;
    }
    Ok(all)
}

fn alignment(args: &EvalArgs, seed: u64, report: &mut String) -> Result<()> {
    let data = read_dataset(&args.samples).with_context(|| format!("loading {}", args.samples.display()))?;
    writeln!(report, "# item, alignment")?;
    let mut scores = Vec::new();
    for (i, p) in data.pairs.iter().enumerate() {
        match alignment_score(&p.video, &p.audio, args.tol) {
            Some(s) => {
                writeln!(report, "{i}, {s}")?;
                scores.push(s);
            }
            None => writeln!(report, "{i}, undefined")?,
        }
    }
    let mean = if scores.is_empty() { f64::NAN } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    let summary = MetricReport {
        metric: format!("alignment_tol{}", args.tol),
        value: mean,
        set_sizes: (scores.len(), data.pairs.len()),
        seed,
    };
    writeln!(report, "{}", summary.line())?;
    Ok(())
}

fn distances(args: &EvalArgs, seed: u64, report: &mut String) -> Result<()> {
    let reference_dir = require_reference(args)?;
    let samples = embed_dir(&args.samples, args, seed)?;
    let reference = embed_dir(reference_dir, args, seed)?;
    let (x, y) = (pooled(&samples)?, pooled(&reference)?);
    let sizes = (x.len(), y.len());
    let line = |metric: &str, value: f64| MetricReport { metric: metric.into(), value, set_sizes: sizes, seed }.line();
    match args.metric {
        Metric::Frechet => {
            let d = frechet_distance(&fit_gaussian(&x)?, &fit_gaussian(&y)?)?;
            writeln!(report, "{}", line("frechet", d))?;
        }
        Metric::Kernel => writeln!(report, "{}", line("kernel", kernel_distance(&x, &y)?))?,
        Metric::FrechetPerSample => {
            let stats = fit_gaussian(&y)?;
            let per: Vec<f64> = samples
                .par_iter()
                .map(|s| per_sample_frechet(s, &stats))
                .collect::<jointdiff::Result<_>>()?;
            writeln!(report, "# item, frechet")?;
            for (i, d) in per.iter().enumerate() {
                writeln!(report, "{i}, {d:e}")?;
            }
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            writeln!(report, "{}", line("frechet_per_sample_mean", mean))?;
        }
        _ => unreachable!("dispatched by metric"),
    }
    Ok(())
}

fn beats(args: &EvalArgs, seed: u64, report: &mut String) -> Result<()> {
    let reference_dir = require_reference(args)?;
    let tolerance = args.tol_ms / 1000.0;
    let anchor = match args.anchor {
        Anchor::Reference => HitAnchor::Reference,
        Anchor::Generated => HitAnchor::Generated,
    };
    let files = files_with_extension(&args.samples, "wav")?;
    let rows: Vec<(String, f64, f64, f64)> = files
        .par_iter()
        .map(|path| {
            let name = path.file_name().expect("listed file").to_string_lossy().into_owned();
            let reference_path = reference_dir.join(&name);
            if !reference_path.exists() {
                return Err(jointdiff::Error::InvalidArgument(format!(
                    "no reference for {name} in {}",
                    reference_dir.display()
                ))
                .into());
            }
            let (gen, _) = beats_of_waveform(&read_wav(path)?)?;
            let (reference, _) = beats_of_waveform(&read_wav(&reference_path)?)?;
            let rate = beat_hit_rate(&gen, &reference, tolerance, anchor)?;
            Ok((name, rate, gen.tempo_bpm, reference.tempo_bpm))
        })
        .collect::<Result<_>>()?;
    writeln!(report, "# file, hit_rate, generated_bpm, reference_bpm")?;
    for (name, rate, g, r) in &rows {
        writeln!(report, "{name}, {rate}, {g:.2}, {r:.2}")?;
    }
    let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let summary = MetricReport {
        metric: format!("beat_hit_rate_{}ms", args.tol_ms),
        value: mean,
        set_sizes: (rows.len(), rows.len()),
        seed,
    };
    writeln!(report, "{}", summary.line())?;
    if tolerance > HIT_TOLERANCE {
        writeln!(report, "# tolerance {} ms: not suggested tolerance", args.tol_ms)?;
    }
    Ok(())
}

pub fn run(args: EvalArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let mut report = String::new();
    match args.metric {
        Metric::Alignment => alignment(&args, seed, &mut report)?,
        Metric::Frechet | Metric::FrechetPerSample | Metric::Kernel => distances(&args, seed, &mut report)?,
        Metric::Beats => beats(&args, seed, &mut report)?,
    }
    match &args.out {
        Some(path) => fs::write(path, report).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{report}"),
    }
    Ok(())
}
