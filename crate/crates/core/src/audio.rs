//! Waveform I/O, the log-mel front end, onset strength, tempo estimation,
//! dynamic-programming beat tracking and the beat hit rate.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::matching::greedy_match_count;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 512;
pub const HOP: usize = 256;
/// Reflect padding on each side; makes 1.8 s at 16 kHz exactly 112 frames.
pub const PAD: usize = 64;
pub const MEL_BINS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads 16-bit PCM RIFF WAVE; multi-channel files are averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: only 16-bit PCM is supported, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let ch = spec.channels as usize;
    let raw: Vec<i16> = reader.samples::<i16>().collect::<std::result::Result<_, _>>().map_err(wav_err)?;
    let samples = raw
        .chunks(ch)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / ch as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    Ok(())
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>> {
    if x.len() <= pad {
        return Err(Error::invalid(format!(
            "waveform of {} samples is too short for {pad}-sample reflect padding",
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(x.len() + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    let last = x.len() - 1;
    out.extend((1..=pad).map(|i| x[last - i]));
    Ok(out)
}

/// Number of STFT frames for `len` input samples.
pub fn frame_count(len: usize) -> usize {
    let padded = len + 2 * PAD;
    if padded < WINDOW {
        0
    } else {
        (padded - WINDOW) / HOP + 1
    }
}

/// Time in seconds at the centre of frame `j`.
pub fn frame_time(j: f64, sample_rate: u32) -> f64 {
    (j * HOP as f64 + (WINDOW / 2) as f64 - PAD as f64) / sample_rate as f64
}

/// One-sided spectra (`WINDOW / 2 + 1` bins) of each frame.
#[derive(Clone, Debug)]
pub struct Stft {
    pub frames: Vec<Vec<Complex<f64>>>,
    pub sample_rate: u32,
}

impl Stft {
    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| f.iter().map(|c| c.norm()).collect())
            .collect()
    }
}

/// Reflect-padded, periodic-Hann STFT with window 512 and hop 256.
pub fn stft(w: &Waveform) -> Result<Stft> {
    if w.samples.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    let padded = reflect_pad(&w.samples, PAD)?;
    let count = frame_count(w.samples.len());
    if count == 0 {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one window",
            w.samples.len()
        )));
    }
    let window = hann(WINDOW);
    let fft = FftPlanner::new().plan_fft_forward(WINDOW);
    let mut frames = Vec::with_capacity(count);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    for j in 0..count {
        let seg = &padded[j * HOP..j * HOP + WINDOW];
        for ((b, &x), &h) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(x * h, 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..WINDOW / 2 + 1].to_vec());
    }
    Ok(Stft {
        frames,
        sample_rate: w.sample_rate,
    })
}

/// Slaney-style mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f < min_log_hz {
        f / f_sp
    } else {
        min_log_mel + (f / min_log_hz).ln() / logstep
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m < min_log_mel {
        m * f_sp
    } else {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    }
}

/// Filter edge frequencies: `bins + 2` points evenly spaced in mel from 0 Hz
/// to Nyquist. Filter `m` peaks at point `m + 1`.
pub fn mel_points(bins: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bins + 1) as f64))
        .collect()
}

/// Triangular, unit-area filters, `(bins, WINDOW / 2 + 1)` row-major.
pub fn mel_filterbank(bins: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let pts = mel_points(bins, sample_rate);
    let n_freq = WINDOW / 2 + 1;
    (0..bins)
        .map(|m| {
            let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            let norm = 2.0 / (hi - lo);
            (0..n_freq)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / WINDOW as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// `(T, MEL_BINS)` log magnitudes.
    pub frames: Vec<Vec<f64>>,
    pub frame_rate: f64,
}

impl MelSpectrogram {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.frames.len(), MEL_BINS],
            self.frames.iter().flatten().copied().collect(),
        )
    }
}

/// `log(melbank . |STFT| + 1e-5)` of a 16 kHz waveform.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz (resample first)",
            w.sample_rate
        )));
    }
    let mags = stft(w)?.magnitudes();
    let bank = mel_filterbank(MEL_BINS, w.sample_rate);
    let frames = mags
        .iter()
        .map(|m| {
            bank.iter()
                .map(|filt| (filt.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() + LOG_FLOOR).ln())
                .collect()
        })
        .collect();
    Ok(MelSpectrogram {
        frames,
        frame_rate: w.sample_rate as f64 / HOP as f64,
    })
}

/// Half-wave rectified frame-to-frame increase of log-mel, summed over bins;
/// frame 0 is 0.
pub fn onset_envelope(m: &MelSpectrogram) -> Vec<f64> {
    let mut env = vec![0.0; m.frames.len()];
    for t in 1..m.frames.len() {
        env[t] = m.frames[t]
            .iter()
            .zip(&m.frames[t - 1])
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    env
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TempoEstimate {
    pub bpm: f64,
    /// Normalized autocorrelation at the chosen lag, in [-1, 1].
    pub confidence: f64,
    pub low_confidence: bool,
}

pub const MIN_BPM: f64 = 40.0;
pub const MAX_BPM: f64 = 240.0;
const PRIOR_BPM: f64 = 120.0;
const LOW_CONFIDENCE: f64 = 0.2;

/// Autocorrelation tempo over 40..240 BPM with a log-normal preference
/// around 120 BPM (one octave wide) and parabolic peak refinement.
pub fn estimate_tempo(onset: &[f64], frame_rate: f64) -> Result<TempoEstimate> {
    let n = onset.len();
    let mean = onset.iter().sum::<f64>() / n.max(1) as f64;
    let x: Vec<f64> = onset.iter().map(|v| v - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if n < 4 || energy <= 1e-12 {
        return Err(Error::invalid("onset envelope is flat; tempo undefined"));
    }
    let ac = |lag: usize| -> f64 { x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / energy };
    let min_lag = (60.0 * frame_rate / MAX_BPM).floor().max(1.0) as usize;
    let max_lag = ((60.0 * frame_rate / MIN_BPM).ceil() as usize).min(n - 2);
    if min_lag >= max_lag {
        return Err(Error::invalid("onset envelope too short for the tempo range"));
    }
    let weight = |lag: f64| {
        let bpm = 60.0 * frame_rate / lag;
        (-0.5 * (bpm / PRIOR_BPM).log2().powi(2)).exp()
    };
    let acs: Vec<f64> = (min_lag - 1..=max_lag + 1).map(|l| ac(l)).collect();
    let at = |lag: usize| acs[lag + 1 - min_lag];
    let best = (min_lag..=max_lag)
        .max_by(|&a, &b| (at(a) * weight(a as f64)).total_cmp(&(at(b) * weight(b as f64))))
        .expect("non-empty lag range");
    let (y0, y1, y2) = (at(best - 1), at(best), at(best + 1));
    let denom = y0 - 2.0 * y1 + y2;
    let offset = if denom < 0.0 { (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let lag = best as f64 + offset;
    let bpm = (60.0 * frame_rate / lag).clamp(MIN_BPM, MAX_BPM);
    Ok(TempoEstimate {
        bpm,
        confidence: y1,
        low_confidence: y1 < LOW_CONFIDENCE,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeatTrack {
    pub beat_times: Vec<f64>,
    pub tempo_bpm: f64,
}

/// Weight of the interval-consistency term in the tracker objective.
pub const TIGHTNESS: f64 = 100.0;

/// Dynamic-programming beat tracker: maximizes summed onset strength at the
/// beats minus `TIGHTNESS * log(interval / period)^2` per interval.
/// `time_of_frame` maps a (fractional) frame index to seconds.
pub fn track_beats(
    onset: &[f64],
    tempo_bpm: f64,
    frame_rate: f64,
    time_of_frame: impl Fn(f64) -> f64,
) -> Result<BeatTrack> {
    if !(MIN_BPM..=MAX_BPM).contains(&tempo_bpm) {
        return Err(Error::invalid(format!("tempo {tempo_bpm} BPM outside [40, 240]")));
    }
    let empty = BeatTrack {
        beat_times: Vec::new(),
        tempo_bpm,
    };
    let n = onset.len();
    let sd = {
        let mean = onset.iter().sum::<f64>() / n.max(1) as f64;
        (onset.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt()
    };
    if n == 0 || sd <= 1e-12 {
        return Ok(empty);
    }
    let period = 60.0 * frame_rate / tempo_bpm;

    // onset normalized and smoothed with a Gaussian of width period / 32
    let sigma = (period / 32.0).max(0.5);
    let half = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let local: Vec<f64> = (0..n as isize)
        .map(|i| {
            (-half..=half)
                .filter(|k| (0..n as isize).contains(&(i + k)))
                .map(|k| kernel[(k + half) as usize] * onset[(i + k) as usize] / sd)
                .sum()
        })
        .collect();

    let mut cum = vec![0.0; n];
    let mut back: Vec<Option<usize>> = vec![None; n];
    let lo = (period / 2.0).round() as usize;
    let hi = (2.0 * period).round() as usize;
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for gap in lo.max(1)..=hi {
            if gap > i {
                break;
            }
            let j = i - gap;
            let score = cum[j] - TIGHTNESS * (gap as f64 / period).ln().powi(2);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, j));
            }
        }
        match best {
            Some((s, j)) if s > 0.0 => {
                cum[i] = local[i] + s;
                back[i] = Some(j);
            }
            _ => cum[i] = local[i],
        }
    }

    // last beat: the final local maximum of the cumulative score that is
    // at least half the median of all local maxima
    let maxima: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&i| cum[i] > cum[i - 1] && cum[i] >= cum[i + 1])
        .collect();
    if maxima.is_empty() {
        return Ok(empty);
    }
    let mut vals: Vec<f64> = maxima.iter().map(|&i| cum[i]).collect();
    vals.sort_by(f64::total_cmp);
    let median = vals[vals.len() / 2];
    let last = *maxima
        .iter()
        .rev()
        .find(|&&i| cum[i] >= 0.5 * median)
        .expect("the median maximum qualifies");
    let mut beats = vec![last];
    while let Some(j) = back[*beats.last().expect("non-empty")] {
        beats.push(j);
    }
    beats.reverse();

    // trim weak beats at both ends (below half the RMS of the smoothed onset)
    let rms = (beats.iter().map(|&b| local[b] * local[b]).sum::<f64>() / beats.len() as f64).sqrt();
    let strong = |b: &usize| local[*b] >= 0.5 * rms;
    let start = beats.iter().position(strong).unwrap_or(beats.len());
    let end = beats.iter().rposition(strong).map_or(start, |e| e + 1);
    Ok(BeatTrack {
        beat_times: beats[start..end].iter().map(|&b| time_of_frame(b as f64)).collect(),
        tempo_bpm,
    })
}

/// Mel front end, tempo and beats of a 16 kHz waveform in one call.
pub fn beats_of_waveform(w: &Waveform) -> Result<(BeatTrack, TempoEstimate)> {
    let mel = mel_spectrogram(w)?;
    let env = onset_envelope(&mel);
    let tempo = estimate_tempo(&env, mel.frame_rate)?;
    let sr = w.sample_rate;
    let track = track_beats(&env, tempo.bpm, mel.frame_rate, |j| frame_time(j, sr))?;
    Ok((track, tempo))
}

/// Which track's beats form the denominator of the hit rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HitAnchor {
    #[default]
    Reference,
    Generated,
}

/// Suggested matching tolerance in seconds.
pub const HIT_TOLERANCE: f64 = 0.1;
/// Supported but not suggested: loose enough to reward near-random beats.
pub const LOOSE_HIT_TOLERANCE: f64 = 0.5;

/// Fraction of anchor beats matched one-to-one, in time order, by a beat of
/// the other track within `tolerance` seconds.
pub fn beat_hit_rate(generated: &BeatTrack, reference: &BeatTrack, tolerance: f64, anchor: HitAnchor) -> Result<f64> {
    let (anchors, others) = match anchor {
        HitAnchor::Reference => (&reference.beat_times, &generated.beat_times),
        HitAnchor::Generated => (&generated.beat_times, &reference.beat_times),
    };
    if anchors.is_empty() {
        return Err(Error::invalid("anchor beat track is empty"));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::invalid("tolerance must be non-negative"));
    }
    Ok(greedy_match_count(anchors, others, tolerance) as f64 / anchors.len() as f64)
}

/// One time in seconds per line.
pub fn write_beats(path: &Path, track: &BeatTrack) -> Result<()> {
    let text: String = track.beat_times.iter().map(|t| format!("{t:.6}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_beats(path: &Path) -> Result<Vec<f64>> {
    let times = fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad beat time `{l}`")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Format("beat times must be strictly increasing".into()));
    }
    Ok(times)
}

/// Click train: a 10 ms decaying 1.5 kHz burst at each time in `clicks`.
pub fn click_track(duration: f64, clicks: &[f64], sample_rate: u32) -> Waveform {
    let len = (duration * sample_rate as f64).round() as usize;
    let mut samples = vec![0.0; len];
    let burst = (0.01 * sample_rate as f64) as usize;
    for &c in clicks {
        let start = (c * sample_rate as f64).round() as usize;
        for k in 0..burst {
            if let Some(s) = samples.get_mut(start + k) {
                let t = k as f64 / sample_rate as f64;
                *s += 0.8 * (-t / 0.002).exp() * (2.0 * PI * 1500.0 * t).sin();
            }
        }
    }
    Waveform { samples, sample_rate }
}

pub fn sine(freq: f64, duration: f64, amplitude: f64, sample_rate: u32) -> Waveform {
    let len = (duration * sample_rate as f64).round() as usize;
    Waveform {
        samples: (0..len)
            .map(|i| amplitude * (2.0 * PI * freq * i as f64 / sample_rate as f64).sin())
            .collect(),
        sample_rate,
    }
}
