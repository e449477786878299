//! Forward corruption `q(x_n | x0)` and the fixed-noise conditioning
//! trajectory used by conditional sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{lincomb, AudioTensor, Dense, VideoTensor};

/// Seeded generator with an explicit stream id. Independent runs (one per
/// sample index) use distinct streams of the same seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal tensor shaped like `like`.
pub fn gaussian_like<T: Dense, R: Rng + ?Sized>(like: &T, rng: &mut R) -> T {
    like.with_data(gaussian_vec(like.len(), rng))
}

pub fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// One paired sample: video `(F, C_v, H, W)` and audio `(T, C_a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalPair {
    pub video: VideoTensor,
    pub audio: AudioTensor,
}

/// A noisy pair at diffusion step `n`.
#[derive(Clone, Debug)]
pub struct NoisyPair {
    pub video: VideoTensor,
    pub audio: AudioTensor,
    pub step: usize,
}

/// `x_n = sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn diffuse<T: Dense>(x0: &T, eps: &T, abar: f64) -> Result<T> {
    if !(0.0..=1.0).contains(&abar) {
        return Err(Error::invalid(format!("alpha_bar {abar} outside [0, 1]")));
    }
    lincomb(abar.sqrt(), x0, (1.0 - abar).sqrt(), eps)
}

/// Corrupt both modalities of `pair` at step `n` with the given noises.
pub fn diffuse_pair(
    pair: &ModalPair,
    eps_video: &VideoTensor,
    eps_audio: &AudioTensor,
    n: usize,
    schedule: &NoiseSchedule,
) -> Result<NoisyPair> {
    if n > schedule.steps() {
        return Err(Error::invalid(format!("step {n} beyond schedule")));
    }
    let abar = schedule.alpha_bar(n);
    Ok(NoisyPair {
        video: diffuse(&pair.video, eps_video, abar)?,
        audio: diffuse(&pair.audio, eps_audio, abar)?,
        step: n,
    })
}

/// `x_0 .. x_N` of a single fixed noise draw: element `n` is
/// `diffuse(x0, eps, abar_n)`. Element 0 equals `x0`.
pub fn conditioning_trajectory<T: Dense>(
    x0: &T,
    eps: &T,
    schedule: &NoiseSchedule,
) -> Result<Vec<T>> {
    schedule
        .alpha_bars()
        .iter()
        .map(|&abar| diffuse(x0, eps, abar))
        .collect()
}
