//! Misaligned ("negative") pairs built from a positive pair: temporal shifts,
//! segment swaps with a donor clip, and full swaps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::ModalPair;
use crate::tensor::{AudioTensor, Dense, VideoTensor};

/// How rows vacated by a temporal shift are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FillPolicy {
    /// Circular shift.
    #[default]
    Wrap,
    Zero,
    /// Repeat the nearest surviving row.
    Edge,
}

impl std::str::FromStr for FillPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrap" => Ok(Self::Wrap),
            "zero" => Ok(Self::Zero),
            "edge" => Ok(Self::Edge),
            _ => Err(Error::invalid(format!("unknown fill policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for FillPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Wrap => "wrap",
            Self::Zero => "zero",
            Self::Edge => "edge",
        })
    }
}

fn row_len<T: Dense>(x: &T) -> usize {
    x.shape()[1..].iter().product()
}

/// Shift `x` along time: output row `t` is input row `t - shift`.
pub fn temporal_shift<T: Dense>(x: &T, shift: isize, fill: FillPolicy) -> Result<T> {
    let len = x.shape()[0];
    if shift.unsigned_abs() >= len {
        return Err(Error::invalid(format!(
            "shift {shift} must be smaller than sequence length {len}"
        )));
    }
    let rl = row_len(x);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for t in 0..len {
        let from = t as isize - shift;
        let from = match fill {
            FillPolicy::Wrap => Some(from.rem_euclid(len as isize) as usize),
            FillPolicy::Zero => (0..len as isize).contains(&from).then_some(from as usize),
            FillPolicy::Edge => Some(from.clamp(0, len as isize - 1) as usize),
        };
        if let Some(f) = from {
            out[t * rl..(t + 1) * rl].copy_from_slice(&src[f * rl..(f + 1) * rl]);
        }
    }
    Ok(x.with_data(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwapSide {
    /// Rows `[0, split)` come from the donor.
    Left,
    /// Rows `[split, len)` come from the donor.
    Right,
}

/// Replace one side of `x` (split at row `split`) with the donor's rows.
pub fn segment_swap<T: Dense>(x: &T, donor: &T, split: usize, side: SwapSide) -> Result<T> {
    if x.shape() != donor.shape() {
        return Err(Error::shape(format!(
            "donor shape {:?} differs from {:?}",
            donor.shape(),
            x.shape()
        )));
    }
    let len = x.shape()[0];
    if split == 0 || split >= len {
        return Err(Error::invalid(format!("split {split} outside 1..{len}")));
    }
    let cut = split * row_len(x);
    let mut out = x.data().to_vec();
    match side {
        SwapSide::Left => out[..cut].copy_from_slice(&donor.data()[..cut]),
        SwapSide::Right => out[cut..].copy_from_slice(&donor.data()[cut..]),
    }
    Ok(x.with_data(out))
}

/// The donor's modality, checked against the positive's shape.
pub fn full_swap<T: Dense>(positive: &T, donor: &T) -> Result<T> {
    if positive.shape() != donor.shape() {
        return Err(Error::shape(format!(
            "donor shape {:?} differs from {:?}",
            donor.shape(),
            positive.shape()
        )));
    }
    Ok(donor.clone())
}

/// How a negative was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeKind {
    TemporalShift { shift: isize },
    SegmentSwap { donor: usize, split: usize, side: SwapSide },
    FullSwap { donor: usize },
}

#[derive(Clone, Debug)]
pub struct NegativeBatch<T> {
    pub items: Vec<T>,
    pub provenance: Vec<NegativeKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeConfig {
    /// Negatives per modality.
    pub count: usize,
    /// Shift magnitude range in video frames, inclusive.
    pub min_shift_frames: usize,
    pub max_shift_frames: usize,
    pub fill: FillPolicy,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        Self {
            count: 2,
            min_shift_frames: 2,
            max_shift_frames: 4,
            fill: FillPolicy::Wrap,
        }
    }
}

/// Negatives for one positive: audio negatives `A'` (paired with the
/// positive video) and video negatives `V'` (paired with the positive audio).
#[derive(Clone, Debug)]
pub struct Negatives {
    pub audio: NegativeBatch<AudioTensor>,
    pub video: NegativeBatch<VideoTensor>,
}

impl Negatives {
    pub fn empty() -> Self {
        Self {
            audio: NegativeBatch { items: Vec::new(), provenance: Vec::new() },
            video: NegativeBatch { items: Vec::new(), provenance: Vec::new() },
        }
    }
}

/// Audio shift (in steps) equivalent to `frames` video frames.
pub fn audio_shift_for(frames: isize, video_frames: usize, audio_steps: usize) -> isize {
    (frames as f64 * audio_steps as f64 / video_frames as f64).round() as isize
}

fn donor_index<R: Rng + ?Sized>(n: usize, positive: usize, rng: &mut R) -> usize {
    let d = rng.random_range(0..n - 1);
    if d >= positive {
        d + 1
    } else {
        d
    }
}

#[derive(Clone, Copy)]
enum Draw {
    Shift(isize),
    Segment(usize, f64, SwapSide),
    Full(usize),
}

fn draw<R: Rng + ?Sized>(config: &NegativeConfig, n_items: usize, positive: usize, rng: &mut R) -> Draw {
    let mode = if n_items < 2 { 0 } else { rng.random_range(0..3) };
    match mode {
        0 => {
            let mag = rng.random_range(config.min_shift_frames..=config.max_shift_frames) as isize;
            Draw::Shift(if rng.random_bool(0.5) { mag } else { -mag })
        }
        1 => {
            let donor = donor_index(n_items, positive, rng);
            let side = if rng.random_bool(0.5) { SwapSide::Left } else { SwapSide::Right };
            // split as a fraction of the clip so both modalities cut at the same time
            Draw::Segment(donor, rng.random_range(0.2..0.8), side)
        }
        _ => Draw::Full(donor_index(n_items, positive, rng)),
    }
}

fn build<T: Dense>(
    positive: &T,
    other: impl Fn(usize) -> T,
    d: Draw,
    shift_scale: impl Fn(isize) -> isize,
    fill: FillPolicy,
) -> Result<(T, NegativeKind)> {
    let len = positive.shape()[0];
    match d {
        Draw::Shift(frames) => {
            let s = shift_scale(frames);
            Ok((temporal_shift(positive, s, fill)?, NegativeKind::TemporalShift { shift: s }))
        }
        Draw::Segment(donor, frac, side) => {
            let split = (frac * len as f64).round().clamp(1.0, (len - 1) as f64) as usize;
            Ok((
                segment_swap(positive, &other(donor), split, side)?,
                NegativeKind::SegmentSwap { donor, split, side },
            ))
        }
        Draw::Full(donor) => Ok((full_swap(positive, &other(donor))?, NegativeKind::FullSwap { donor })),
    }
}

/// Draw `config.count` audio and video negatives for `dataset[positive]`.
/// With fewer than two items only temporal shifts are possible.
pub fn sample_negatives<R: Rng + ?Sized>(
    dataset: &[ModalPair],
    positive: usize,
    config: &NegativeConfig,
    rng: &mut R,
) -> Result<Negatives> {
    let pair = dataset
        .get(positive)
        .ok_or_else(|| Error::invalid(format!("positive index {positive} outside dataset")))?;
    let frames = pair.video.frames();
    let steps = pair.audio.steps();
    if config.min_shift_frames == 0 || config.min_shift_frames > config.max_shift_frames {
        return Err(Error::invalid("shift range must satisfy 1 <= min <= max"));
    }
    if config.max_shift_frames >= frames || audio_shift_for(config.max_shift_frames as isize, frames, steps) as usize >= steps {
        return Err(Error::invalid(format!(
            "shift of {} frames does not fit a clip of {frames} frames",
            config.max_shift_frames
        )));
    }
    if frames < 2 || steps < 2 {
        return Err(Error::invalid("negatives need at least two rows per modality"));
    }
    if dataset.len() < 2 {
        log::warn!("dataset has a single item; negatives fall back to temporal shifts");
    }

    let mut audio = NegativeBatch { items: Vec::new(), provenance: Vec::new() };
    for _ in 0..config.count {
        let d = draw(config, dataset.len(), positive, rng);
        let (x, k) = build(
            &pair.audio,
            |i| dataset[i].audio.clone(),
            d,
            |f| audio_shift_for(f, frames, steps),
            config.fill,
        )?;
        audio.items.push(x);
        audio.provenance.push(k);
    }
    let mut video = NegativeBatch { items: Vec::new(), provenance: Vec::new() };
    for _ in 0..config.count {
        let d = draw(config, dataset.len(), positive, rng);
        let (x, k) = build(&pair.video, |i| dataset[i].video.clone(), d, |f| f, config.fill)?;
        video.items.push(x);
        video.provenance.push(k);
    }
    Ok(Negatives { audio, video })
}
