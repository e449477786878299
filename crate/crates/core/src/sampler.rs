//! Deterministic DDIM sampling: joint generation, and conditional generation
//! of one modality given the other with optional reconstruction guidance.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::forward::{diffuse, gaussian_like, ModalPair};
use crate::fusion::Modality;
use crate::schedule::{eps_from_v, x0_from_v, NoiseSchedule};
use crate::tensor::{lincomb, AudioTensor, Dense, VideoTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Direction {
    #[default]
    Joint,
    VideoToAudio,
    AudioToVideo,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "v2a" | "video_to_audio" => Ok(Self::VideoToAudio),
            "a2v" | "audio_to_video" => Ok(Self::AudioToVideo),
            _ => Err(Error::invalid(format!("unknown direction `{s}`"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::VideoToAudio => "v2a",
            Self::AudioToVideo => "a2v",
        })
    }
}

/// How the guidance weight varies over the denoising steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GuidanceSchedule {
    #[default]
    Constant,
    /// `lambda * (1 - abar_n)`
    OneMinusAlphaBar,
}

impl FromStr for GuidanceSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "one_minus_abar" => Ok(Self::OneMinusAlphaBar),
            _ => Err(Error::invalid(format!("unknown guidance schedule `{s}`"))),
        }
    }
}

impl fmt::Display for GuidanceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::OneMinusAlphaBar => "one_minus_abar",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub lambda: f64,
    pub lambda_schedule: GuidanceSchedule,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 200,
            lambda: 0.0,
            lambda_schedule: GuidanceSchedule::Constant,
            direction: Direction::Joint,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn lambda_at(&self, abar: f64) -> f64 {
        match self.lambda_schedule {
            GuidanceSchedule::Constant => self.lambda,
            GuidanceSchedule::OneMinusAlphaBar => self.lambda * (1.0 - abar),
        }
    }
}

/// `ddim_steps + 1` indices from `train_steps` down to 0 on a uniform stride.
pub fn ddim_timesteps(train_steps: usize, ddim_steps: usize) -> Result<Vec<usize>> {
    if ddim_steps == 0 || ddim_steps > train_steps {
        return Err(Error::invalid(format!(
            "DDIM steps {ddim_steps} outside 1..={train_steps}"
        )));
    }
    Ok((0..=ddim_steps)
        .map(|i| (train_steps * (ddim_steps - i) + ddim_steps / 2) / ddim_steps)
        .collect())
}

/// Deterministic DDIM update from `abar_n` to `abar_prev` given a velocity.
pub fn ddim_step<T: Dense>(x_n: &T, v_pred: &T, abar_n: f64, abar_prev: f64) -> Result<T> {
    check_order(abar_n, abar_prev)?;
    let x0 = x0_from_v(x_n, v_pred, abar_n)?;
    let eps = eps_from_v(x_n, v_pred, abar_n)?;
    ddim_update(&x0, &eps, abar_prev)
}

/// `sqrt(abar_prev) x0 + sqrt(1 - abar_prev) eps`.
pub fn ddim_update<T: Dense>(x0: &T, eps: &T, abar_prev: f64) -> Result<T> {
    lincomb(abar_prev.sqrt(), x0, (1.0 - abar_prev).sqrt(), eps)
}

fn check_order(abar_n: f64, abar_prev: f64) -> Result<()> {
    if !(abar_n < abar_prev && abar_prev <= 1.0 && abar_n >= 0.0) {
        return Err(Error::invalid(format!(
            "need 0 <= abar_n < abar_prev <= 1, got {abar_n} and {abar_prev}"
        )));
    }
    Ok(())
}

fn check_finite<T: Dense>(x: &T, what: &str, step: usize, n: usize) -> Result<()> {
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite {what} at DDIM step {step} (n = {n}), element {i} = {}",
            x.data()[i]
        )));
    }
    Ok(())
}

/// Both modalities from the standard-normal prior through the full DDIM grid.
pub fn sample_joint<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ModalPair> {
    check_model(model, schedule)?;
    let shapes = model.shapes();
    let mut v = gaussian_like(&VideoTensor::zeros(shapes.video), rng);
    let mut a = gaussian_like(&AudioTensor::zeros(shapes.audio), rng);
    let grid = ddim_timesteps(schedule.steps(), config.ddim_steps)?;
    for (i, w) in grid.windows(2).enumerate() {
        let (n, prev) = (w[0], w[1]);
        let (abar, abar_prev) = (schedule.alpha_bar(n), schedule.alpha_bar(prev));
        let out = model.predict(&v, &a, n)?;
        v = ddim_step(&v, &out.video, abar, abar_prev)?;
        a = ddim_step(&a, &out.audio, abar, abar_prev)?;
        check_finite(&v, "video", i, n)?;
        check_finite(&a, "audio", i, n)?;
    }
    Ok(ModalPair { video: v, audio: a })
}

/// The known modality's clean value and its noise draw, fixed for the run.
#[derive(Clone, Debug)]
pub enum Condition {
    Video { x0: VideoTensor, eps: VideoTensor },
    Audio { x0: AudioTensor, eps: AudioTensor },
}

impl Condition {
    pub fn video<R: Rng + ?Sized>(x0: VideoTensor, rng: &mut R) -> Self {
        let eps = gaussian_like(&x0, rng);
        Self::Video { x0, eps }
    }

    pub fn audio<R: Rng + ?Sized>(x0: AudioTensor, rng: &mut R) -> Self {
        let eps = gaussian_like(&x0, rng);
        Self::Audio { x0, eps }
    }

    pub fn modality(&self) -> Modality {
        match self {
            Self::Video { .. } => Modality::Video,
            Self::Audio { .. } => Modality::Audio,
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Self::Video { .. } => Direction::VideoToAudio,
            Self::Audio { .. } => Direction::AudioToVideo,
        }
    }
}

fn check_model<D: Denoiser + ?Sized>(model: &D, schedule: &NoiseSchedule) -> Result<()> {
    if model.num_steps() != schedule.steps() {
        return Err(Error::invalid(format!(
            "model expects {} steps, schedule has {}",
            model.num_steps(),
            schedule.steps()
        )));
    }
    Ok(())
}

/// Gradient w.r.t. the target modality's noisy input of the squared
/// reconstruction error `||c0 - x0_hat_c||^2` of the conditioning modality,
/// flattened in the target's layout.
pub fn guidance_gradient<D: Denoiser + ?Sized>(
    model: &D,
    v_n: &VideoTensor,
    a_n: &AudioTensor,
    n: usize,
    condition: &Condition,
    abar: f64,
) -> Result<Vec<f64>> {
    if !model.supports_input_gradients() {
        return Err(Error::Capability("guidance needs a model with input gradients".into()));
    }
    let out = model.predict(v_n, a_n, n)?;
    let coef = 2.0 * (1.0 - abar).sqrt();
    // d||c0 - x0_hat||^2 / dv_hat = 2 sqrt(1 - abar) (c0 - x0_hat)
    let cot = match condition {
        Condition::Video { x0, .. } => {
            let recon = x0_from_v(v_n, &out.video, abar)?;
            DenoiserOutput {
                video: lincomb(coef, x0, -coef, &recon)?,
                audio: AudioTensor::zeros(a_n.dims()),
            }
        }
        Condition::Audio { x0, .. } => {
            let recon = x0_from_v(a_n, &out.audio, abar)?;
            DenoiserOutput {
                video: VideoTensor::zeros(v_n.dims()),
                audio: lincomb(coef, x0, -coef, &recon)?,
            }
        }
    };
    let (gv, ga) = model.input_gradients(v_n, a_n, n, &cot)?;
    Ok(match condition {
        Condition::Video { .. } => ga.data().to_vec(),
        Condition::Audio { .. } => gv.data().to_vec(),
    })
}

/// One reverse step of the target modality. The conditioning input is the
/// fixed trajectory point at `n`.
fn guided_target_step<D: Denoiser + ?Sized, T: Dense>(
    model: &D,
    v_n: &VideoTensor,
    a_n: &AudioTensor,
    target_n: &T,
    target_v: &T,
    condition: &Condition,
    n: usize,
    abar: f64,
    abar_prev: f64,
    lambda: f64,
) -> Result<T> {
    check_order(abar, abar_prev)?;
    let mut x0 = x0_from_v(target_n, target_v, abar)?;
    let eps = eps_from_v(target_n, target_v, abar)?;
    if lambda > 0.0 {
        let grad = guidance_gradient(model, v_n, a_n, n, condition, abar)?;
        x0 = lincomb(1.0, &x0, -lambda * abar.sqrt(), &target_n.with_data(grad))?;
    }
    ddim_update(&x0, &eps, abar_prev)
}

/// Generate the missing modality given `condition`. Returns the pair with
/// the conditioning modality set to its clean value.
pub fn sample_conditional<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    condition: &Condition,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ModalPair> {
    check_model(model, schedule)?;
    if config.direction != condition.direction() {
        return Err(Error::invalid(format!(
            "sampler direction {} does not match a {:?} condition",
            config.direction,
            condition.modality()
        )));
    }
    if !(config.lambda >= 0.0 && config.lambda.is_finite()) {
        return Err(Error::invalid(format!("guidance weight must be >= 0, got {}", config.lambda)));
    }
    if config.lambda > 0.0 && !model.supports_input_gradients() {
        return Err(Error::Capability("guidance needs a model with input gradients".into()));
    }
    let shapes = model.shapes();
    let grid = ddim_timesteps(schedule.steps(), config.ddim_steps)?;
    match condition {
        Condition::Video { x0: c0, eps: ce } => {
            shapes.check(c0, &AudioTensor::zeros(shapes.audio))?;
            let mut a = gaussian_like(&AudioTensor::zeros(shapes.audio), rng);
            for (i, w) in grid.windows(2).enumerate() {
                let (n, prev) = (w[0], w[1]);
                let (abar, abar_prev) = (schedule.alpha_bar(n), schedule.alpha_bar(prev));
                let v_n = diffuse(c0, ce, abar)?;
                let out = model.predict(&v_n, &a, n)?;
                let lam = config.lambda_at(abar);
                a = guided_target_step(model, &v_n, &a, &a, &out.audio, condition, n, abar, abar_prev, lam)?;
                check_finite(&a, "audio", i, n)?;
            }
            Ok(ModalPair { video: c0.clone(), audio: a })
        }
        Condition::Audio { x0: c0, eps: ce } => {
            shapes.check(&VideoTensor::zeros(shapes.video), c0)?;
            let mut v = gaussian_like(&VideoTensor::zeros(shapes.video), rng);
            for (i, w) in grid.windows(2).enumerate() {
                let (n, prev) = (w[0], w[1]);
                let (abar, abar_prev) = (schedule.alpha_bar(n), schedule.alpha_bar(prev));
                let a_n = diffuse(c0, ce, abar)?;
                let out = model.predict(&v, &a_n, n)?;
                let lam = config.lambda_at(abar);
                v = guided_target_step(model, &v, &a_n, &v, &out.video, condition, n, abar, abar_prev, lam)?;
                check_finite(&v, "video", i, n)?;
            }
            Ok(ModalPair { video: v, audio: c0.clone() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticGaussianDenoiser, GaussianWorld, PairShape};
    use crate::forward::{conditioning_trajectory, stream_rng};
    use crate::synthdata::zero_mean;
    use crate::tensor::Tensor;
    use crate::toynet::{ToyNet, ToyNetConfig};
    use nalgebra::{DMatrix, DVector};
    use std::sync::atomic::{AtomicUsize, Ordering};

    const SHAPES: PairShape = PairShape {
        video: [1, 1, 2, 2],
        audio: [4, 1],
    };

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn timestep_grid() {
        let g = ddim_timesteps(1000, 200).unwrap();
        assert_eq!(g.len(), 201);
        assert_eq!((g[0], g[1], g[200]), (1000, 995, 0));
        let odd = ddim_timesteps(1000, 3).unwrap();
        assert_eq!(odd, vec![1000, 667, 333, 0]);
        assert!(ddim_timesteps(10, 0).is_err() && ddim_timesteps(10, 11).is_err());
        for s in 1..=50 {
            assert!(ddim_timesteps(50, s).unwrap().windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn ddim_terminal_and_ray() {
        let x = t(&[0.3, -1.2]);
        let v = t(&[0.5, 0.1]);
        let x0 = x0_from_v(&x, &v, 0.4).unwrap();
        assert_eq!(ddim_step(&x, &v, 0.4, 1.0).unwrap(), x0);

        // v for which x0_hat = x / sqrt(abar) and eps_hat = 0: v = -sqrt(1-abar)/sqrt(abar) x
        let abar: f64 = 0.3;
        let v = crate::tensor::scale(&x, -(1.0 - abar).sqrt() / abar.sqrt());
        let out = ddim_step(&x, &v, abar, 0.7).unwrap();
        let expect = crate::tensor::scale(&x, (0.7f64 / abar).sqrt());
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ddim_step(&x, &v, 0.7, 0.3).is_err());
    }

    #[test]
    fn ddim_scalar_hand_case() {
        // x_n = 1, v = 0.5, abar 0.5 -> 0.9
        let s = 0.5f64.sqrt();
        let x0 = s * 1.0 - s * 0.5;
        let eps = s * 0.5 + s * 1.0;
        let expect = 0.9f64.sqrt() * x0 + 0.1f64.sqrt() * eps;
        let got = ddim_step(&t(&[1.0]), &t(&[0.5]), 0.5, 0.9).unwrap();
        assert!((got.data()[0] - expect).abs() < 1e-15);
        assert!((got.data()[0] - 0.670_820_393).abs() < 1e-9);
    }

    fn analytic(rho: f64) -> AnalyticGaussianDenoiser {
        let world = GaussianWorld::correlated_blocks(4, 4, rho, zero_mean(8)).unwrap();
        AnalyticGaussianDenoiser::new(world, NoiseSchedule::default(), SHAPES).unwrap()
    }

    #[test]
    fn joint_sampling_deterministic_and_centered() {
        let model = analytic(0.5);
        let schedule = NoiseSchedule::default();
        let config = SamplerConfig { ddim_steps: 50, ..Default::default() };
        let a = sample_joint(&model, &schedule, &config, &mut stream_rng(1, 0)).unwrap();
        let b = sample_joint(&model, &schedule, &config, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(a, b);
        let mut mean = [0.0; 8];
        let runs = 400;
        for r in 0..runs {
            let p = sample_joint(&model, &schedule, &config, &mut stream_rng(2, r)).unwrap();
            for (m, x) in mean.iter_mut().zip(PairShape::join(&p.video, &p.audio)) {
                *m += x / runs as f64;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 0.2), "{mean:?}");
    }

    /// Mean of the generated audio over `runs` v2a samples.
    fn v2a_mean(model: &AnalyticGaussianDenoiser, given: &VideoTensor, config: &SamplerConfig, runs: u64) -> Vec<f64> {
        let schedule = NoiseSchedule::default();
        let mut mean = vec![0.0; 4];
        for r in 0..runs {
            let mut rng = stream_rng(9, r);
            let cond = Condition::video(given.clone(), &mut rng);
            let out = sample_conditional(model, &cond, &schedule, config, &mut rng).unwrap();
            mean.iter_mut().zip(out.audio.data()).for_each(|(m, a)| *m += a / runs as f64);
        }
        mean
    }

    #[test]
    fn light_guidance_beats_replacement_on_gaussian_oracle() {
        let model = analytic(0.9);
        let given = VideoTensor::new(SHAPES.video, vec![1.0, -1.2, 0.6, 1.5]).unwrap();
        let truth: Vec<f64> = given.data().iter().map(|v| 0.9 * v).collect();
        let err = |m: Vec<f64>| m.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let base = SamplerConfig { direction: Direction::VideoToAudio, ..Default::default() };
        let guided = SamplerConfig { lambda: 0.1, lambda_schedule: GuidanceSchedule::OneMinusAlphaBar, ..base.clone() };
        let (replaced, steered) = (err(v2a_mean(&model, &given, &base, 200)), err(v2a_mean(&model, &given, &guided, 200)));
        // replacement alone shrinks the conditional mean toward the prior
        assert!(replaced > 0.3, "{replaced}");
        assert!(steered < replaced / 2.0, "{steered} vs {replaced}");
    }

    /// Counts calls into the gradient path of the wrapped model.
    struct Probe<'a> {
        inner: &'a AnalyticGaussianDenoiser,
        grads: AtomicUsize,
    }

    impl Denoiser for Probe<'_> {
        fn shapes(&self) -> PairShape {
            self.inner.shapes()
        }
        fn num_steps(&self) -> usize {
            self.inner.num_steps()
        }
        fn predict(&self, v: &VideoTensor, a: &AudioTensor, n: usize) -> Result<DenoiserOutput> {
            self.inner.predict(v, a, n)
        }
        fn supports_input_gradients(&self) -> bool {
            true
        }
        fn input_gradients(&self, v: &VideoTensor, a: &AudioTensor, n: usize, c: &DenoiserOutput) -> Result<(VideoTensor, AudioTensor)> {
            self.grads.fetch_add(1, Ordering::SeqCst);
            self.inner.input_gradients(v, a, n, c)
        }
    }

    #[test]
    fn replacement_never_reads_gradients_and_matches_manual_loop() {
        let inner = analytic(0.9);
        let probe = Probe { inner: &inner, grads: AtomicUsize::new(0) };
        let schedule = NoiseSchedule::default();
        let config = SamplerConfig { ddim_steps: 40, direction: Direction::VideoToAudio, ..Default::default() };
        let mut rng = stream_rng(3, 0);
        let c0 = gaussian_like(&VideoTensor::zeros(SHAPES.video), &mut rng);
        let cond = Condition::video(c0.clone(), &mut rng);
        let out = sample_conditional(&probe, &cond, &schedule, &config, &mut stream_rng(4, 0)).unwrap();
        assert_eq!(probe.grads.load(Ordering::SeqCst), 0);
        assert_eq!(out.video, c0);

        // replacement: clamp video to its noisy trajectory, plain DDIM on audio
        let Condition::Video { eps, .. } = &cond else { unreachable!() };
        let traj = conditioning_trajectory(&c0, eps, &schedule).unwrap();
        let mut a = gaussian_like(&AudioTensor::zeros(SHAPES.audio), &mut stream_rng(4, 0));
        for w in ddim_timesteps(1000, 40).unwrap().windows(2) {
            let o = inner.predict(&traj[w[0]], &a, w[0]).unwrap();
            a = ddim_step(&a, &o.audio, schedule.alpha_bar(w[0]), schedule.alpha_bar(w[1])).unwrap();
        }
        assert_eq!(out.audio, a);

        let guided = SamplerConfig { lambda: 0.5, ..config };
        sample_conditional(&probe, &cond, &schedule, &guided, &mut stream_rng(4, 0)).unwrap();
        assert_eq!(probe.grads.load(Ordering::SeqCst), 40);
    }

    #[test]
    fn direction_and_capability_errors() {
        let model = analytic(0.9);
        let schedule = NoiseSchedule::default();
        let mut rng = stream_rng(5, 0);
        let cond = Condition::audio(AudioTensor::zeros(SHAPES.audio), &mut rng);
        let wrong = SamplerConfig { direction: Direction::VideoToAudio, ..Default::default() };
        assert!(sample_conditional(&model, &cond, &schedule, &wrong, &mut rng).is_err());

        struct NoGrad<'a>(&'a AnalyticGaussianDenoiser);
        impl Denoiser for NoGrad<'_> {
            fn shapes(&self) -> PairShape {
                self.0.shapes()
            }
            fn num_steps(&self) -> usize {
                1000
            }
            fn predict(&self, v: &VideoTensor, a: &AudioTensor, n: usize) -> Result<DenoiserOutput> {
                self.0.predict(v, a, n)
            }
        }
        let cfg = SamplerConfig { direction: Direction::AudioToVideo, lambda: 1.0, ..Default::default() };
        assert!(matches!(
            sample_conditional(&NoGrad(&model), &cond, &schedule, &cfg, &mut rng),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn guidance_gradient_matches_linear_expression() {
        // For the Gaussian posterior mean x0_hat = mu + G (x_n - sqrt(abar) mu) with
        // G = sqrt(abar) S (abar S + (1 - abar) I)^-1, the gradient w.r.t. the audio input
        // of ||c0 - x0_hat_video||^2 is -2 G_va^T r.
        let world = GaussianWorld::correlated_blocks(4, 4, 0.7, DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.2, -0.1, 0.4])).unwrap();
        let schedule = NoiseSchedule::default();
        let model = AnalyticGaussianDenoiser::new(world.clone(), schedule.clone(), SHAPES).unwrap();
        let n = 350;
        let abar = schedule.alpha_bar(n);
        let mut rng = stream_rng(6, 0);
        let v_n = gaussian_like(&VideoTensor::zeros(SHAPES.video), &mut rng);
        let a_n = gaussian_like(&AudioTensor::zeros(SHAPES.audio), &mut rng);
        let cond = Condition::video(gaussian_like(&VideoTensor::zeros(SHAPES.video), &mut rng), &mut rng);
        let got = guidance_gradient(&model, &v_n, &a_n, n, &cond, abar).unwrap();

        let s = world.covariance();
        let m = s * abar + DMatrix::identity(8, 8) * (1.0 - abar);
        let g = s * m.try_inverse().unwrap() * abar.sqrt();
        let x = DVector::from_vec(PairShape::join(&v_n, &a_n));
        let mu = world.mean();
        let x0_hat = mu + &g * (x - mu * abar.sqrt());
        let Condition::Video { x0, .. } = &cond else { unreachable!() };
        let r = DVector::from_vec(x0.data().to_vec()) - x0_hat.rows(0, 4);
        let expect = -2.0 * g.view((0, 4), (4, 4)).transpose() * r;
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn guidance_gradient_zero_for_independent_modalities() {
        let model = analytic(0.0);
        let schedule = NoiseSchedule::default();
        let mut rng = stream_rng(7, 0);
        let v_n = gaussian_like(&VideoTensor::zeros(SHAPES.video), &mut rng);
        let a_n = gaussian_like(&AudioTensor::zeros(SHAPES.audio), &mut rng);
        let cond = Condition::audio(gaussian_like(&a_n, &mut rng), &mut rng);
        let g = guidance_gradient(&model, &v_n, &a_n, 600, &cond, schedule.alpha_bar(600)).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn toynet_guidance_gradient_finite_difference() {
        let net = ToyNet::new(ToyNetConfig { shapes: SHAPES, hidden: vec![7, 5], steps: 1000, skip: true }, 3);
        let schedule = NoiseSchedule::default();
        let n = 420;
        let abar = schedule.alpha_bar(n);
        let mut rng = stream_rng(8, 0);
        let v_n = gaussian_like(&VideoTensor::zeros(SHAPES.video), &mut rng);
        let a_n = gaussian_like(&AudioTensor::zeros(SHAPES.audio), &mut rng);
        let x0 = gaussian_like(&v_n, &mut rng);
        let cond = Condition::video(x0.clone(), &mut rng);
        let g = guidance_gradient(&net, &v_n, &a_n, n, &cond, abar).unwrap();
        let objective = |a: &AudioTensor| {
            let out = net.predict(&v_n, a, n).unwrap();
            let recon = x0_from_v(&v_n, &out.video, abar).unwrap();
            crate::tensor::sq_norm(&lincomb(1.0, &x0, -1.0, &recon).unwrap())
        };
        let h = 1e-6;
        for i in 0..a_n.len() {
            let mut up = a_n.data().to_vec();
            up[i] += h;
            let mut down = a_n.data().to_vec();
            down[i] -= h;
            let fd = (objective(&a_n.with_data(up)) - objective(&a_n.with_data(down))) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "{i}: {fd} vs {}", g[i]);
        }
    }
}
