//! Joint diffusion loss, the contrastive objective against negatives, and the
//! training loop with Adam and a stepped learning-rate decay.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::{Denoiser, PairShape};
use crate::error::{Error, Result};
use crate::forward::{diffuse, gaussian_like, stream_rng, ModalPair};
use crate::negatives::{sample_negatives, NegativeConfig, NegativeKind, Negatives};
use crate::schedule::{velocity, NoiseSchedule, ScheduleDescriptor};
use crate::tensor::{mse, AudioTensor, Dense, VideoTensor};
use crate::toynet::{save_checkpoint, CheckpointMeta, ToyNet, ToyNetGrads};

/// `lr = max(floor, initial * factor^(step / interval))`, integer division.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub interval: usize,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            factor: 0.8,
            interval: 80_000,
            floor: 2e-5,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            factor: 1.0,
            interval: 1,
            floor: lr,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        let decays = (step / self.interval.max(1)) as i32;
        (self.initial * self.factor.powi(decays)).max(self.floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the negative terms.
    pub eta: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr: LrSchedule,
    pub negatives: NegativeConfig,
    pub seed: u64,
    pub schedule: ScheduleDescriptor,
    /// Fraction of `total_steps` trained with `eta = 0` before the
    /// contrastive terms switch on.
    pub contrastive_start: f64,
    /// Cap each negative loss at this multiple of the positive loss.
    pub negative_clamp: Option<f64>,
    pub adam: AdamConfig,
    /// Checkpoint cadence for [`Trainer::run`]; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 5e-5,
            batch_size: 8,
            total_steps: 1000,
            lr: LrSchedule::default(),
            negatives: NegativeConfig::default(),
            seed: 0,
            schedule: NoiseSchedule::default().descriptor(),
            contrastive_start: 0.5,
            negative_clamp: None,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.lr.floor > self.lr.initial || self.lr.floor < 0.0 {
            return Err(Error::invalid("learning rate floor must lie in [0, initial]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.contrastive_start) {
            return Err(Error::invalid("contrastive start must be a fraction in [0, 1]"));
        }
        if self.eta > 0.0 && self.negatives.count == 0 {
            return Err(Error::invalid("eta > 0 needs at least one negative"));
        }
        if let Some(c) = self.negative_clamp {
            if c <= 0.0 {
                return Err(Error::invalid("negative clamp factor must be positive"));
            }
        }
        Ok(())
    }

    /// Contrastive weight in effect at `step`.
    pub fn eta_at(&self, step: usize) -> f64 {
        if (step as f64) >= self.contrastive_start * self.total_steps as f64 {
            self.eta
        } else {
            0.0
        }
    }
}

pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    config.lr.at(step)
}

/// Mean squared velocity error of each modality, summed over modalities.
pub fn joint_diffusion_loss<D: Denoiser + ?Sized>(
    model: &D,
    pair: &ModalPair,
    n: usize,
    eps_v: &VideoTensor,
    eps_a: &AudioTensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    schedule.check_step(n)?;
    let abar = schedule.alpha_bar(n);
    let v_n = diffuse(&pair.video, eps_v, abar)?;
    let a_n = diffuse(&pair.audio, eps_a, abar)?;
    let out = model.predict(&v_n, &a_n, n)?;
    let target_v = velocity(&pair.video, eps_v, abar)?;
    let target_a = velocity(&pair.audio, eps_a, abar)?;
    Ok(mse(&out.video, &target_v)? + mse(&out.audio, &target_a)?)
}

/// Noise for one positive and its negatives. A negative pair keeps the
/// positive's noise on the unaltered modality and uses its own draw on the
/// negative one.
#[derive(Clone, Debug)]
pub struct PairNoise {
    pub video: VideoTensor,
    pub audio: AudioTensor,
    pub neg_audio: Vec<AudioTensor>,
    pub neg_video: Vec<VideoTensor>,
}

impl PairNoise {
    pub fn draw<R: Rng + ?Sized>(pair: &ModalPair, negatives: &Negatives, rng: &mut R) -> Self {
        Self {
            video: gaussian_like(&pair.video, rng),
            audio: gaussian_like(&pair.audio, rng),
            neg_audio: negatives.audio.items.iter().map(|x| gaussian_like(x, rng)).collect(),
            neg_video: negatives.video.items.iter().map(|x| gaussian_like(x, rng)).collect(),
        }
    }
}

/// Components of the contrastive objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub positive: f64,
    /// Mean loss over audio negatives (positive video, negative audio).
    pub neg_audio: f64,
    /// Mean loss over video negatives (negative video, positive audio).
    pub neg_video: f64,
    /// Negative terms capped by the clamp.
    pub clamped: usize,
}

/// `L = L(v, a) - eta * mean L(v, a-) - eta * mean L(v-, a)`.
pub fn contrastive_loss<D: Denoiser + ?Sized>(
    model: &D,
    pair: &ModalPair,
    negatives: &Negatives,
    n: usize,
    noise: &PairNoise,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Result<LossParts> {
    let positive = joint_diffusion_loss(model, pair, n, &noise.video, &noise.audio, schedule)?;
    if eta == 0.0 {
        return Ok(LossParts {
            total: positive,
            positive,
            ..Default::default()
        });
    }
    if negatives.audio.items.is_empty() || negatives.video.items.is_empty() {
        return Err(Error::invalid("eta > 0 needs negatives of both modalities"));
    }
    let mut neg_audio = 0.0;
    for (a, eps) in negatives.audio.items.iter().zip(&noise.neg_audio) {
        let p = ModalPair {
            video: pair.video.clone(),
            audio: a.clone(),
        };
        neg_audio += joint_diffusion_loss(model, &p, n, &noise.video, eps, schedule)?;
    }
    neg_audio /= negatives.audio.items.len() as f64;
    let mut neg_video = 0.0;
    for (v, eps) in negatives.video.items.iter().zip(&noise.neg_video) {
        let p = ModalPair {
            video: v.clone(),
            audio: pair.audio.clone(),
        };
        neg_video += joint_diffusion_loss(model, &p, n, eps, &noise.audio, schedule)?;
    }
    neg_video /= negatives.video.items.len() as f64;
    Ok(LossParts {
        total: positive - eta * neg_audio - eta * neg_video,
        positive,
        neg_audio,
        neg_video,
        clamped: 0,
    })
}

/// Loss of one `(video, audio)` term and its parameter gradient, scaled by
/// `weight`, accumulated into `grads` (skipped when `weight == 0`).
#[allow(clippy::too_many_arguments)]
fn term_with_grad(
    net: &ToyNet,
    video: &VideoTensor,
    audio: &AudioTensor,
    eps_v: &VideoTensor,
    eps_a: &AudioTensor,
    n: usize,
    abar: f64,
    weight: impl FnOnce(f64) -> f64,
    grads: &mut ToyNetGrads,
) -> Result<f64> {
    let v_n = diffuse(video, eps_v, abar)?;
    let a_n = diffuse(audio, eps_a, abar)?;
    let cache = net.forward(&v_n, &a_n, n)?;
    let target = PairShape::join(&velocity(video, eps_v, abar)?, &velocity(audio, eps_a, abar)?);
    let (lv, la) = (video.len(), audio.len());
    let mut cot = vec![0.0; lv + la];
    let (mut sv, mut sa) = (0.0, 0.0);
    for (i, (o, t)) in cache.output.iter().zip(&target).enumerate() {
        let r = o - t;
        let len = if i < lv { lv } else { la };
        if i < lv {
            sv += r * r;
        } else {
            sa += r * r;
        }
        cot[i] = 2.0 * r / len as f64;
    }
    let loss = sv / lv as f64 + sa / la as f64;
    let w = weight(loss);
    if w != 0.0 {
        net.backward_into(&cache, &cot, w, grads, false);
    }
    Ok(loss)
}

/// Contrastive loss of one positive and the gradient of `scale * L`.
#[allow(clippy::too_many_arguments)]
fn item_gradients(
    net: &ToyNet,
    pair: &ModalPair,
    negatives: &Negatives,
    noise: &PairNoise,
    n: usize,
    abar: f64,
    eta: f64,
    clamp: Option<f64>,
    scale: f64,
) -> Result<(LossParts, ToyNetGrads)> {
    let mut grads = ToyNetGrads::zeros_like(net);
    let positive = term_with_grad(net, &pair.video, &pair.audio, &noise.video, &noise.audio, n, abar, |_| scale, &mut grads)?;
    let mut parts = LossParts {
        total: positive,
        positive,
        ..Default::default()
    };
    if eta == 0.0 {
        return Ok((parts, grads));
    }
    let cap = clamp.map(|c| c * positive);
    let mut clamped = 0;
    let weight_for = |count: usize| {
        let w = -eta * scale / count as f64;
        move |loss: f64| match cap {
            Some(c) if loss > c => 0.0,
            _ => w,
        }
    };
    let capped = |loss: f64, clamped: &mut usize| match cap {
        Some(c) if loss > c => {
            *clamped += 1;
            c
        }
        _ => loss,
    };

    let na = negatives.audio.items.len();
    let mut sum_a = 0.0;
    for (a, eps) in negatives.audio.items.iter().zip(&noise.neg_audio) {
        let l = term_with_grad(net, &pair.video, a, &noise.video, eps, n, abar, weight_for(na), &mut grads)?;
        sum_a += capped(l, &mut clamped);
    }
    let nv = negatives.video.items.len();
    let mut sum_v = 0.0;
    for (v, eps) in negatives.video.items.iter().zip(&noise.neg_video) {
        let l = term_with_grad(net, v, &pair.audio, eps, &noise.audio, n, abar, weight_for(nv), &mut grads)?;
        sum_v += capped(l, &mut clamped);
    }
    parts.neg_audio = sum_a / na as f64;
    parts.neg_video = sum_v / nv as f64;
    parts.total = positive - eta * (parts.neg_audio + parts.neg_video);
    parts.clamped = clamped;
    Ok((parts, grads))
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: ToyNetGrads,
    v: ToyNetGrads,
    t: i32,
}

impl Adam {
    pub fn new(net: &ToyNet, config: AdamConfig) -> Self {
        Self {
            config,
            m: ToyNetGrads::zeros_like(net),
            v: ToyNetGrads::zeros_like(net),
            t: 0,
        }
    }

    pub fn update(&mut self, net: &mut ToyNet, grads: &ToyNetGrads, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let step = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                if lr != 0.0 {
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        };
        for (((layer, g), m), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            step(&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight);
            step(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// One training step's log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Batch mean of the contrastive objective.
    pub loss: f64,
    /// Batch mean of the positive diffusion loss.
    pub loss_pos: f64,
    pub loss_neg_a: f64,
    pub loss_neg_v: f64,
    pub n: usize,
    pub lr: f64,
    pub eta: f64,
    pub clamped: usize,
    /// Dataset index of each positive in the batch.
    pub positives: Vec<usize>,
    /// Provenance of every negative used, per positive.
    pub provenance: Vec<Vec<NegativeKind>>,
}

impl StepMetrics {
    /// `step, loss, loss_neg_a, loss_neg_v, n, lr`
    pub fn line(&self) -> String {
        format!(
            "{}, {:e}, {:e}, {:e}, {}, {:e}",
            self.step, self.loss, self.loss_neg_a, self.loss_neg_v, self.n, self.lr
        )
    }
}

/// Single-writer training loop state.
#[derive(Clone, Debug)]
pub struct Trainer {
    net: ToyNet,
    adam: Adam,
    config: TrainConfig,
    schedule: NoiseSchedule,
    step: usize,
}

const STEP_SEED_SALT: u64 = 0x7a11_5eed_0000_0001;

impl Trainer {
    pub fn new(net: ToyNet, config: TrainConfig) -> Result<Self> {
        Self::resume(net, config, 0)
    }

    /// Continue from `step` (optimizer moments restart from zero).
    pub fn resume(net: ToyNet, config: TrainConfig, step: usize) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        if schedule.steps() != net.config().steps {
            return Err(Error::invalid(format!(
                "model expects {} diffusion steps, schedule has {}",
                net.config().steps,
                schedule.steps()
            )));
        }
        let adam = Adam::new(&net, config.adam.clone());
        Ok(Self {
            net,
            adam,
            config,
            schedule,
            step,
        })
    }

    pub fn net(&self) -> &ToyNet {
        &self.net
    }

    pub fn into_net(self) -> ToyNet {
        self.net
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Sample a batch of positives and their negatives, draw one step `n`
    /// and all noises, then apply one Adam update on the batch-mean objective.
    /// Positives, `n` and positive noise come from one random stream and the
    /// negatives with their noise from another, so runs differing only in
    /// `eta` see identical positive batches. Negatives are skipped while the
    /// effective `eta` is 0.
    pub fn train_step(&mut self, dataset: &[ModalPair]) -> Result<StepMetrics> {
        if dataset.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let shapes = self.net.config().shapes;
        for p in dataset {
            shapes.check(&p.video, &p.audio)?;
        }
        let stream = 2 * self.step as u64;
        let mut rng = stream_rng(self.config.seed ^ STEP_SEED_SALT, stream);
        let mut neg_rng = stream_rng(self.config.seed ^ STEP_SEED_SALT, stream + 1);
        let eta = self.config.eta_at(self.step);
        let b = self.config.batch_size;
        let positives: Vec<usize> = (0..b).map(|_| rng.random_range(0..dataset.len())).collect();
        let n = rng.random_range(1..=self.schedule.steps());
        let mut negatives = Vec::with_capacity(b);
        let mut noises = Vec::with_capacity(b);
        for &i in &positives {
            let negs = if eta > 0.0 {
                sample_negatives(dataset, i, &self.config.negatives, &mut neg_rng)?
            } else {
                Negatives::empty()
            };
            let mut noise = PairNoise::draw(&dataset[i], &Negatives::empty(), &mut rng);
            noise.neg_audio = negs.audio.items.iter().map(|x| gaussian_like(x, &mut neg_rng)).collect();
            noise.neg_video = negs.video.items.iter().map(|x| gaussian_like(x, &mut neg_rng)).collect();
            negatives.push(negs);
            noises.push(noise);
        }

        let abar = self.schedule.alpha_bar(n);
        let scale = 1.0 / b as f64;
        let net = &self.net;
        let clamp = self.config.negative_clamp;
        let per_item: Vec<(LossParts, ToyNetGrads)> = (0..b)
            .into_par_iter()
            .map(|k| {
                item_gradients(net, &dataset[positives[k]], &negatives[k], &noises[k], n, abar, eta, clamp, scale)
            })
            .collect::<Result<_>>()?;

        let mut grads = ToyNetGrads::zeros_like(net);
        let mut mean = LossParts::default();
        for (parts, g) in &per_item {
            grads.add_scaled(g, 1.0);
            mean.total += parts.total * scale;
            mean.positive += parts.positive * scale;
            mean.neg_audio += parts.neg_audio * scale;
            mean.neg_video += parts.neg_video * scale;
            mean.clamped += parts.clamped;
        }
        let lr = self.config.lr.at(self.step);
        let metrics = StepMetrics {
            step: self.step,
            loss: mean.total,
            loss_pos: mean.positive,
            loss_neg_a: mean.neg_audio,
            loss_neg_v: mean.neg_video,
            n,
            lr,
            eta,
            clamped: mean.clamped,
            positives,
            provenance: negatives
                .iter()
                .map(|ng| ng.audio.provenance.iter().chain(&ng.video.provenance).copied().collect())
                .collect(),
        };
        if !mean.total.is_finite() || !grads.all_finite() {
            return Err(Error::Numerical(format!("non-finite loss or gradient at {}", metrics.line())));
        }
        if mean.clamped > 0 {
            log::info!("step {}: {} negative terms clamped", self.step, mean.clamped);
        }
        self.adam.update(&mut self.net, &grads, lr);
        self.step += 1;
        Ok(metrics)
    }

    /// Train until `config.total_steps`, writing one metrics line per step
    /// and a checkpoint every `checkpoint_every` steps into `checkpoint_dir`.
    pub fn run<W: Write>(
        &mut self,
        dataset: &[ModalPair],
        metrics: &mut W,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepMetrics>> {
        let mut records = Vec::new();
        while self.step < self.config.total_steps {
            let m = self.train_step(dataset)?;
            writeln!(metrics, "{}", m.line())?;
            records.push(m);
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    let path = dir.join(format!("checkpoint_{:07}.cmck", self.step));
                    save_checkpoint(&path, &self.net, &self.checkpoint_meta())?;
                }
            }
        }
        metrics.flush()?;
        Ok(records)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            schedule: self.config.schedule.clone(),
            seed: self.config.seed,
            train_step: self.step,
        }
    }
}
