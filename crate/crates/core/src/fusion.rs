//! Easy fusion: make both modalities visible to each other at every temporal
//! position by nearest-neighbour time resampling, spatial pooling and
//! spatial repetition, followed by channel concatenation.
//!
//! Video branch: `a (T, C_a) -> NN to F -> repeat over H x W -> concat after v`.
//! Audio branch: `v -> mean over H x W -> NN to T -> concat after a`.

use crate::error::Result;
use crate::tensor::{
    broadcast_spatial, concat_channels, nn_index, nn_resample_time, slice_channels,
    spatial_mean_pool, AudioTensor, Dense, Tensor, VideoTensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Video,
    Audio,
}

/// Output of [`easy_fuse`] with per-channel provenance.
#[derive(Clone, Debug)]
pub struct FusedPair {
    /// `(F, C_v + C_a, H, W)`
    pub video: VideoTensor,
    /// `(T, C_a + C_v)`
    pub audio: AudioTensor,
    pub video_channels: Vec<Modality>,
    pub audio_channels: Vec<Modality>,
}

pub fn easy_fuse(v: &VideoTensor, a: &AudioTensor) -> Result<FusedPair> {
    let [frames, c_v, h, w] = v.dims();
    let [steps, c_a] = a.dims();

    let audio_at_frames = nn_resample_time(a.as_tensor(), frames)?;
    let audio_planes = broadcast_spatial(&audio_at_frames, h, w)?;
    let video = VideoTensor::from_tensor(concat_channels(v.as_tensor(), audio_planes.as_tensor())?)?;

    let pooled = spatial_mean_pool(v);
    let video_at_steps = nn_resample_time(&pooled, steps)?;
    let audio = AudioTensor::from_tensor(concat_channels(a.as_tensor(), &video_at_steps)?)?;

    let mut video_channels = vec![Modality::Video; c_v];
    video_channels.extend(std::iter::repeat_n(Modality::Audio, c_a));
    let mut audio_channels = vec![Modality::Audio; c_a];
    audio_channels.extend(std::iter::repeat_n(Modality::Video, c_v));

    Ok(FusedPair {
        video,
        audio,
        video_channels,
        audio_channels,
    })
}

/// Gradient of a scalar w.r.t. the unfused inputs, given its gradients w.r.t.
/// the two fused tensors (flattened in their native layouts).
pub fn easy_fuse_vjp(
    video_dims: [usize; 4],
    audio_dims: [usize; 2],
    grad_video_fused: &[f64],
    grad_audio_fused: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [frames, c_v, h, w] = video_dims;
    let [steps, c_a] = audio_dims;
    let plane = h * w;
    let c_fv = c_v + c_a;
    let c_fa = c_a + c_v;
    let mut gv = vec![0.0; frames * c_v * plane];
    let mut ga = vec![0.0; steps * c_a];

    for f in 0..frames {
        let src_t = nn_index(f, steps, frames);
        for c in 0..c_fv {
            let g = &grad_video_fused[(f * c_fv + c) * plane..(f * c_fv + c + 1) * plane];
            if c < c_v {
                gv[(f * c_v + c) * plane..(f * c_v + c + 1) * plane].copy_from_slice(g);
            } else {
                ga[src_t * c_a + (c - c_v)] += g.iter().sum::<f64>();
            }
        }
    }
    for t in 0..steps {
        let src_f = nn_index(t, frames, steps);
        for c in 0..c_fa {
            let g = grad_audio_fused[t * c_fa + c];
            if c < c_a {
                ga[t * c_a + c] += g;
            } else {
                let share = g / plane as f64;
                let cv = c - c_a;
                for x in &mut gv[(src_f * c_v + cv) * plane..(src_f * c_v + cv + 1) * plane] {
                    *x += share;
                }
            }
        }
    }
    (gv, ga)
}

fn channels_of(labels: &[Modality], which: Modality) -> Option<(usize, usize)> {
    let first = labels.iter().position(|&m| m == which)?;
    let last = labels.iter().rposition(|&m| m == which)?;
    labels[first..=last]
        .iter()
        .all(|&m| m == which)
        .then_some((first, last + 1))
}

/// Structural check behind treating self-attention over fused tensors as an
/// implicit cross-attention: every temporal position of each fused tensor
/// must carry channels derived from the opposite modality, and those
/// channels must equal a re-derivation from the native channels.
pub fn fused_attention_contract(fused: &FusedPair) -> bool {
    let check = || -> Option<bool> {
        let [frames, _, h, w] = fused.video.dims();
        let steps = fused.audio.steps();

        let (vs, ve) = channels_of(&fused.video_channels, Modality::Video)?;
        let (vas, vae) = channels_of(&fused.video_channels, Modality::Audio)?;
        let (as_, ae) = channels_of(&fused.audio_channels, Modality::Audio)?;
        let (avs, ave) = channels_of(&fused.audio_channels, Modality::Video)?;

        // audio-derived planes inside the fused video
        let native_audio = slice_channels(fused.audio.as_tensor(), as_, ae).ok()?;
        let expect_v = broadcast_spatial(&nn_resample_time(&native_audio, frames).ok()?, h, w).ok()?;
        let got_v = slice_channels(fused.video.as_tensor(), vas, vae).ok()?;

        // video-derived columns inside the fused audio
        let native_video =
            VideoTensor::from_tensor(slice_channels(fused.video.as_tensor(), vs, ve).ok()?).ok()?;
        let expect_a = nn_resample_time(&spatial_mean_pool(&native_video), steps).ok()?;
        let got_a = slice_channels(fused.audio.as_tensor(), avs, ave).ok()?;

        if got_v.shape() != expect_v.shape() || got_a.shape() != expect_a.shape() {
            return Some(false);
        }
        let rows_match = |got: &Tensor, expect: &Tensor, len: usize| {
            (0..len).all(|t| got.row(t) == expect.row(t))
        };
        Some(
            rows_match(&got_v, expect_v.as_tensor(), frames)
                && rows_match(&got_a, &expect_a, steps),
        )
    };
    check().unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{gaussian_like, stream_rng};

    fn random_pair(f: usize, cv: usize, h: usize, w: usize, t: usize, ca: usize, seed: u64) -> (VideoTensor, AudioTensor) {
        let mut rng = stream_rng(seed, 0);
        let v = gaussian_like(&VideoTensor::zeros([f, cv, h, w]), &mut rng);
        let a = gaussian_like(&AudioTensor::zeros([t, ca]), &mut rng);
        (v, a)
    }

    #[test]
    fn fused_shapes() {
        let v = VideoTensor::zeros([18, 4, 16, 16]);
        let a = AudioTensor::zeros([112, 80]);
        let fused = easy_fuse(&v, &a).unwrap();
        assert_eq!(fused.video.dims(), [18, 84, 16, 16]);
        assert_eq!(fused.audio.dims(), [112, 84]);
    }

    #[test]
    fn constants_propagate() {
        let v = VideoTensor::new([3, 2, 2, 2], vec![1.5; 24]).unwrap();
        let a = AudioTensor::new([7, 3], vec![-4.0; 21]).unwrap();
        let fused = easy_fuse(&v, &a).unwrap();
        let appended_v = slice_channels(fused.video.as_tensor(), 2, 5).unwrap();
        assert!(appended_v.data().iter().all(|&x| x == -4.0));
        let appended_a = slice_channels(fused.audio.as_tensor(), 3, 5).unwrap();
        assert!(appended_a.data().iter().all(|&x| x == 1.5));
    }

    #[test]
    fn leading_channels_are_the_inputs() {
        let (v, a) = random_pair(5, 2, 3, 3, 17, 4, 1);
        let fused = easy_fuse(&v, &a).unwrap();
        assert_eq!(&slice_channels(fused.video.as_tensor(), 0, 2).unwrap(), v.as_tensor());
        assert_eq!(&slice_channels(fused.audio.as_tensor(), 0, 4).unwrap(), a.as_tensor());
    }

    #[test]
    fn impulse_lands_at_nn_frame() {
        let (f, t) = (18, 112);
        let mut data = vec![0.0; t];
        let hot = 57;
        data[hot] = 1.0;
        let a = AudioTensor::new([t, 1], data).unwrap();
        let v = VideoTensor::zeros([f, 1, 2, 2]);
        let fused = easy_fuse(&v, &a).unwrap();
        for frame in 0..f {
            let plane = &fused.video.as_tensor().row(frame)[4..8];
            let expect = if nn_index(frame, t, f) == hot { 1.0 } else { 0.0 };
            assert!(plane.iter().all(|&x| x == expect), "frame {frame}");
        }
    }

    #[test]
    fn contract_holds_for_fuse_output() {
        let (v, a) = random_pair(18, 2, 4, 4, 112, 8, 2);
        assert!(fused_attention_contract(&easy_fuse(&v, &a).unwrap()));
    }

    #[test]
    fn contract_breaks_when_video_columns_zeroed() {
        let (v, a) = random_pair(6, 2, 3, 3, 20, 3, 3);
        let mut fused = easy_fuse(&v, &a).unwrap();
        let native = slice_channels(fused.audio.as_tensor(), 0, 3).unwrap();
        let zeros = Tensor::zeros(&[20, 2]).unwrap();
        fused.audio = AudioTensor::from_tensor(concat_channels(&native, &zeros).unwrap()).unwrap();
        assert!(!fused_attention_contract(&fused));
    }

    #[test]
    fn contract_holds_over_shape_sweep() {
        for f in 1..=32 {
            for t in (1..=128).step_by(9) {
                let (v, a) = random_pair(f, 1, 2, 1, t, 2, (f * 1000 + t) as u64);
                assert!(fused_attention_contract(&easy_fuse(&v, &a).unwrap()), "F={f} T={t}");
            }
        }
    }

    #[test]
    fn vjp_matches_linear_map() {
        // easy_fuse is linear, so <g, fuse(x)> = <vjp(g), x> for all x, g.
        let (v, a) = random_pair(4, 2, 2, 3, 9, 3, 4);
        let fused = easy_fuse(&v, &a).unwrap();
        let mut rng = stream_rng(4, 9);
        let gv = gaussian_like(&fused.video, &mut rng);
        let ga = gaussian_like(&fused.audio, &mut rng);
        let lhs: f64 = fused.video.data().iter().zip(gv.data()).map(|(x, y)| x * y).sum::<f64>()
            + fused.audio.data().iter().zip(ga.data()).map(|(x, y)| x * y).sum::<f64>();
        let (dv, da) = easy_fuse_vjp(v.dims(), a.dims(), gv.data(), ga.data());
        let rhs: f64 = v.data().iter().zip(&dv).map(|(x, y)| x * y).sum::<f64>()
            + a.data().iter().zip(&da).map(|(x, y)| x * y).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
