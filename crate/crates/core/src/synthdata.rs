//! Desk-scale datasets: jointly Gaussian pairs with exact oracles, and an
//! event-synchronized "flash + click" set for alignment experiments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::Rng;

use crate::denoiser::{GaussianWorld, PairShape};
use crate::error::{Error, Result};
use crate::forward::{gaussian_vec, stream_rng, ModalPair};
use crate::matching::greedy_match_count;
use crate::tensor::{load_tensor, nn_index, save_tensor, AudioTensor, VideoTensor};

/// `count` i.i.d. draws from `world`, split into modality tensors.
pub fn gaussian_pairs(world: &GaussianWorld, count: usize, shapes: PairShape, seed: u64) -> Result<Vec<ModalPair>> {
    if world.dim() != shapes.total_len() {
        return Err(Error::shape(format!(
            "world dimension {} != {} (video) + {} (audio)",
            world.dim(),
            shapes.video_len(),
            shapes.audio_len()
        )));
    }
    let mut rng = stream_rng(seed, 0);
    (0..count)
        .map(|_| {
            let x = world.sample(&mut rng);
            let (video, audio) = shapes.split(x.as_slice().to_vec())?;
            Ok(ModalPair { video, audio })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventDatasetConfig {
    pub num_items: usize,
    pub video: [usize; 4],
    pub audio: [usize; 2],
    pub events_per_clip: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for EventDatasetConfig {
    fn default() -> Self {
        Self {
            num_items: 100,
            video: [18, 2, 8, 8],
            audio: [112, 8],
            events_per_clip: 3,
            amplitude: 1.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl EventDatasetConfig {
    pub fn shapes(&self) -> PairShape {
        PairShape {
            video: self.video,
            audio: self.audio,
        }
    }
}

/// One synthetic clip with its ground-truth event frames.
#[derive(Clone, Debug)]
pub struct EventItem {
    pub pair: ModalPair,
    pub event_frames: Vec<usize>,
}

/// Audio timesteps whose nearest video frame is `frame`.
pub fn audio_steps_for_frame(frame: usize, frames: usize, steps: usize) -> impl Iterator<Item = usize> {
    (0..steps).filter(move |&t| nn_index(t, frames, steps) == frame)
}

fn draw_event_frames<R: Rng + ?Sized>(frames: usize, k: usize, rng: &mut R) -> Vec<usize> {
    // k events at least 2 frames apart: pick k slots among frames - k + 1 and
    // spread them out by their rank.
    let slots = frames + 1 - k;
    let mut picks = sample(rng, slots, k).into_vec();
    picks.sort_unstable();
    picks.iter().enumerate().map(|(i, &p)| p + i).collect()
}

/// Item `i` is generated from stream `i` of `config.seed`.
pub fn event_pairs(config: &EventDatasetConfig) -> Result<Vec<EventItem>> {
    let [frames, c_v, h, w] = config.video;
    let [steps, c_a] = config.audio;
    let k = config.events_per_clip;
    if k == 0 {
        return Err(Error::invalid("need at least one event per clip"));
    }
    if 2 * k > frames + 1 {
        return Err(Error::invalid(format!(
            "{k} events with 2-frame spacing do not fit in {frames} frames"
        )));
    }
    if config.noise < 0.0 || config.amplitude <= 0.0 {
        return Err(Error::invalid("noise must be >= 0 and amplitude > 0"));
    }
    let frame_len = c_v * h * w;
    (0..config.num_items)
        .map(|i| {
            let mut rng = stream_rng(config.seed, i as u64);
            let event_frames = draw_event_frames(frames, k, &mut rng);
            let mut v: Vec<f64> = gaussian_vec(frames * frame_len, &mut rng)
                .into_iter()
                .map(|x| x * config.noise)
                .collect();
            let mut a: Vec<f64> = gaussian_vec(steps * c_a, &mut rng)
                .into_iter()
                .map(|x| x * config.noise)
                .collect();
            for &f in &event_frames {
                v[f * frame_len..(f + 1) * frame_len]
                    .iter_mut()
                    .for_each(|x| *x += config.amplitude);
                for t in audio_steps_for_frame(f, frames, steps) {
                    a[t * c_a..(t + 1) * c_a].iter_mut().for_each(|x| *x += config.amplitude);
                }
            }
            Ok(EventItem {
                pair: ModalPair {
                    video: VideoTensor::new(config.video, v)?,
                    audio: AudioTensor::new(config.audio, a)?,
                },
                event_frames,
            })
        })
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Indices whose value exceeds the background level by 3 sigma. Background
/// mean and sigma are the median and the scaled median absolute deviation, so
/// the events themselves do not inflate the threshold.
pub fn detect_events(series: &[f64]) -> Vec<usize> {
    if series.is_empty() {
        return Vec::new();
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let center = median(&sorted);
    let mut dev: Vec<f64> = series.iter().map(|x| (x - center).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let sigma = (1.4826 * median(&dev)).max(1e-12);
    let threshold = center + 3.0 * sigma;
    series
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > threshold)
        .map(|(i, _)| i)
        .collect()
}

pub fn video_event_frames(v: &VideoTensor) -> Vec<usize> {
    let means: Vec<f64> = (0..v.frames()).map(|f| v.frame_mean(f)).collect();
    detect_events(&means)
}

/// Detected audio event columns mapped to (deduplicated) video frame indices.
pub fn audio_event_frames(a: &AudioTensor, frames: usize) -> Vec<usize> {
    let means: Vec<f64> = (0..a.steps()).map(|t| a.column_mean(t)).collect();
    let mut out: Vec<usize> = detect_events(&means)
        .into_iter()
        .map(|t| nn_index(t, frames, a.steps()))
        .collect();
    out.dedup();
    out
}

/// Fraction of detected video events matched one-to-one by an audio event
/// within `tolerance_frames`. `None` when no video event is detected.
pub fn alignment_score(v: &VideoTensor, a: &AudioTensor, tolerance_frames: usize) -> Option<f64> {
    let video: Vec<f64> = video_event_frames(v).into_iter().map(|f| f as f64).collect();
    if video.is_empty() {
        return None;
    }
    let audio: Vec<f64> = audio_event_frames(a, v.frames())
        .into_iter()
        .map(|f| f as f64)
        .collect();
    let matched = greedy_match_count(&video, &audio, tolerance_frames as f64);
    Some(matched as f64 / video.len() as f64)
}

/// What kind of data a dataset directory holds.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    Event(EventDatasetConfig),
    Gaussian {
        rho: f64,
        shapes: PairShape,
        count: usize,
        seed: u64,
    },
}

const INDEX_FILE: &str = "index.txt";
const MANIFEST_FILE: &str = "manifest.txt";

fn dims(d: &[usize]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")
}

fn item_paths(dir: &Path, i: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("item_{i:05}_video.cmdt")),
        dir.join(format!("item_{i:05}_audio.cmdt")),
    )
}

/// Writes one tensor file per modality per item, `index.txt` with per-item
/// labels and `manifest.txt` echoing the generating configuration.
pub fn write_dataset(dir: &Path, kind: &DatasetKind, pairs: &[ModalPair], labels: &[Vec<usize>]) -> Result<()> {
    let manifest = match kind {
        DatasetKind::Event(c) => format!(
            "kind=event\nitems={}\nvideo={}\naudio={}\nevents_per_clip={}\namplitude={}\nnoise={}\nseed={}\n",
            c.num_items,
            dims(&c.video),
            dims(&c.audio),
            c.events_per_clip,
            c.amplitude,
            c.noise,
            c.seed
        ),
        DatasetKind::Gaussian {
            rho,
            shapes,
            count,
            seed,
        } => format!(
            "kind=gaussian\nitems={count}\nvideo={}\naudio={}\nrho={rho}\nseed={seed}\n",
            dims(&shapes.video),
            dims(&shapes.audio)
        ),
    };
    write_pairs(dir, pairs, labels, &manifest)
}

/// The directory layout shared by datasets and sample sets, with a caller
/// supplied manifest.
pub fn write_pairs(dir: &Path, pairs: &[ModalPair], labels: &[Vec<usize>], manifest: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("# item, stream, events\n");
    for (i, p) in pairs.iter().enumerate() {
        let (vp, ap) = item_paths(dir, i);
        save_tensor(&vp, p.video.as_tensor())?;
        save_tensor(&ap, p.audio.as_tensor())?;
        let events = labels
            .get(i)
            .map(|e| e.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        writeln!(index, "{i}, {i}, {events}").expect("string write");
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// A dataset loaded back from disk.
#[derive(Clone, Debug)]
pub struct StoredDataset {
    pub pairs: Vec<ModalPair>,
    pub labels: Vec<Vec<usize>>,
    pub manifest: String,
}

impl StoredDataset {
    pub fn shapes(&self) -> Option<PairShape> {
        self.pairs.first().map(|p| PairShape {
            video: p.video.dims(),
            audio: p.audio.dims(),
        })
    }
}

pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let index = fs::read_to_string(dir.join(INDEX_FILE))?;
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for line in index.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let mut fields = line.splitn(3, ',');
        let i: usize = fields
            .next()
            .and_then(|x| x.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad index line `{line}`")))?;
        let events = fields
            .nth(1)
            .unwrap_or("")
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| Error::Format(format!("bad event label `{x}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let (vp, ap) = item_paths(dir, i);
        pairs.push(ModalPair {
            video: VideoTensor::from_tensor(load_tensor(&vp)?)?,
            audio: AudioTensor::from_tensor(load_tensor(&ap)?)?,
        });
        labels.push(events);
    }
    if pairs.is_empty() {
        return Err(Error::Format(format!("dataset {} is empty", dir.display())));
    }
    Ok(StoredDataset {
        pairs,
        labels,
        manifest,
    })
}

/// Mean vector `[0; d]` helper for block worlds.
pub fn zero_mean(d: usize) -> DVector<f64> {
    DVector::zeros(d)
}
