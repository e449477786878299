//! Small dense v-predictor over easy-fused inputs, with exact reverse-mode
//! gradients for both parameters and inputs, and its checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::{Denoiser, DenoiserOutput, PairShape};
use crate::error::{Error, Result};
use crate::forward::{gaussian_vec, stream_rng};
use crate::fusion::{easy_fuse, easy_fuse_vjp};
use crate::schedule::ScheduleDescriptor;
use crate::tensor::{read_tensor, write_tensor, AudioTensor, Dense, Tensor, VideoTensor};

/// Width of the sinusoidal timestep encoding appended to the input.
pub const TIME_FEATURES: usize = 32;

/// Sinusoidal features of `n / N`, log-spaced angular frequencies 1..500.
pub fn time_features(n: usize, steps: usize) -> [f64; TIME_FEATURES] {
    let tau = n as f64 / steps as f64;
    let half = TIME_FEATURES / 2;
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..half {
        let omega = (k as f64 / (half - 1) as f64 * 500f64.ln()).exp();
        out[2 * k] = (omega * tau).sin();
        out[2 * k + 1] = (omega * tau).cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyNetConfig {
    pub shapes: PairShape,
    pub hidden: Vec<usize>,
    /// Training diffusion steps `N`.
    pub steps: usize,
    /// Add a copy of each noisy input to its output head, scaled by a gate
    /// that is a learned linear function of the time features.
    pub skip: bool,
}

impl ToyNetConfig {
    /// Length of the network input: both fused tensors plus time features.
    pub fn input_len(&self) -> usize {
        let [f, cv, h, w] = self.shapes.video;
        let [t, ca] = self.shapes.audio;
        f * (cv + ca) * h * w + t * (ca + cv) + TIME_FEATURES
    }

    pub fn output_len(&self) -> usize {
        self.shapes.total_len()
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_len()];
        w.extend(&self.hidden);
        w.push(self.output_len());
        w
    }
}

/// Affine layer, weights stored `(outputs, inputs)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Parameter gradients, laid out like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNetGrads {
    pub layers: Vec<Linear>,
}

impl ToyNetGrads {
    pub fn zeros_like(net: &ToyNet) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Linear::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ToyNetGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += scale * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Saved activations of one forward pass.
pub struct ForwardCache {
    /// Input to each dense layer; entry 0 is the network input.
    inputs: Vec<Vec<f64>>,
    /// `[v_n | a_n]`, kept only when the skip path is on.
    native: Vec<f64>,
    time: [f64; TIME_FEATURES],
    gates: [f64; 2],
    pub output: Vec<f64>,
}

/// Dense tanh network over `[flatten(fused video) | flatten(fused audio) | time]`.
/// With `skip` set, the last entry of the layer list is the `(2, TIME_FEATURES)`
/// gate layer and each head adds `gate * (its noisy input)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    config: ToyNetConfig,
    layers: Vec<Linear>,
}

impl ToyNet {
    /// Gaussian init with variance `1 / fan_in`.
    pub fn new(config: ToyNetConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x70e7);
        Self::init_with(config, &mut rng)
    }

    /// The skip gate starts at zero.
    pub fn init_with<R: Rng + ?Sized>(config: ToyNetConfig, rng: &mut R) -> Self {
        let widths = config.widths();
        let mut layers: Vec<Linear> = widths
            .windows(2)
            .map(|w| {
                let scale = (w[0] as f64).recip().sqrt();
                let mut l = Linear::zeros(w[0], w[1]);
                l.weight = gaussian_vec(w[0] * w[1], rng).into_iter().map(|v| v * scale).collect();
                l
            })
            .collect();
        if config.skip {
            layers.push(Linear::zeros(TIME_FEATURES, 2));
        }
        Self { config, layers }
    }

    pub fn zeros(config: ToyNetConfig) -> Self {
        let widths = config.widths();
        let mut layers: Vec<Linear> = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        if config.skip {
            layers.push(Linear::zeros(TIME_FEATURES, 2));
        }
        Self { config, layers }
    }

    fn dense_len(&self) -> usize {
        self.layers.len() - usize::from(self.config.skip)
    }

    pub fn config(&self) -> &ToyNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flattened fused input with time features.
    pub fn input_vector(&self, v_n: &VideoTensor, a_n: &AudioTensor, n: usize) -> Result<Vec<f64>> {
        let fused = easy_fuse(v_n, a_n)?;
        let mut x = Vec::with_capacity(self.config.input_len());
        x.extend_from_slice(fused.video.data());
        x.extend_from_slice(fused.audio.data());
        x.extend_from_slice(&time_features(n, self.config.steps));
        Ok(x)
    }

    pub fn forward(&self, v_n: &VideoTensor, a_n: &AudioTensor, n: usize) -> Result<ForwardCache> {
        let time = time_features(n, self.config.steps);
        let dense = self.dense_len();
        let mut inputs = Vec::with_capacity(dense);
        let mut h = self.input_vector(v_n, a_n, n)?;
        for (i, layer) in self.layers[..dense].iter().enumerate() {
            let mut z = layer.apply(&h);
            if i + 1 < dense {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(h);
            h = z;
        }
        let mut gates = [0.0; 2];
        let mut native = Vec::new();
        if self.config.skip {
            let g = self.layers[dense].apply(&time);
            gates = [g[0], g[1]];
            native = PairShape::join(v_n, a_n);
            let lv = self.config.shapes.video_len();
            for (i, (o, x)) in h.iter_mut().zip(&native).enumerate() {
                *o += gates[usize::from(i >= lv)] * x;
            }
        }
        Ok(ForwardCache {
            inputs,
            native,
            time,
            gates,
            output: h,
        })
    }

    /// Accumulates `scale * dL/dtheta` into `grads` given `dL/doutput`, and
    /// returns the (unscaled) gradients w.r.t. `v_n` and `a_n` when
    /// `want_input` is set.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
        scale: f64,
        grads: &mut ToyNetGrads,
        want_input: bool,
    ) -> Option<(VideoTensor, AudioTensor)> {
        let dense = self.dense_len();
        let lv = self.config.shapes.video_len();
        if self.config.skip {
            let mut dg = [0.0; 2];
            for (i, (c, x)) in grad_output.iter().zip(&cache.native).enumerate() {
                dg[usize::from(i >= lv)] += c * x;
            }
            let g = &mut grads.layers[dense];
            for (m, d) in dg.iter().enumerate() {
                let d = d * scale;
                g.bias[m] += d;
                g.weight[m * TIME_FEATURES..(m + 1) * TIME_FEATURES]
                    .iter_mut()
                    .zip(&cache.time)
                    .for_each(|(w, t)| *w += d * t);
            }
        }

        let mut delta: Vec<f64> = grad_output.iter().map(|g| g * scale).collect();
        for i in (0..dense).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for (j, &d) in delta.iter().enumerate() {
                g.bias[j] += d;
                if d != 0.0 {
                    let row = &mut g.weight[j * layer.inputs..(j + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
                }
            }
            if i == 0 && !want_input {
                return None;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (j, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &layer.weight[j * layer.inputs..(j + 1) * layer.inputs];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
            }
            if i > 0 {
                // input of layer i is tanh output of layer i - 1
                prev.iter_mut().zip(input).for_each(|(p, h)| *p *= 1.0 - h * h);
                delta = prev;
                continue;
            }
            // the caller wants dL/dx unscaled by `scale`
            if scale != 0.0 {
                prev.iter_mut().for_each(|p| *p /= scale);
            }
            let (mut gv, mut ga) = self.fused_input_grad(&prev);
            if self.config.skip {
                let (cv, ca) = grad_output.split_at(lv);
                gv.iter_mut().zip(cv).for_each(|(g, c)| *g += cache.gates[0] * c);
                ga.iter_mut().zip(ca).for_each(|(g, c)| *g += cache.gates[1] * c);
            }
            let shapes = self.config.shapes;
            return Some((
                VideoTensor::new(shapes.video, gv).expect("gradient shape"),
                AudioTensor::new(shapes.audio, ga).expect("gradient shape"),
            ));
        }
        unreachable!("a network has at least one dense layer")
    }

    fn split_output(&self, out: Vec<f64>) -> Result<DenoiserOutput> {
        let (video, audio) = self.config.shapes.split(out)?;
        Ok(DenoiserOutput { video, audio })
    }

    /// Parameter and input gradients of `<cotangent, predict(v_n, a_n, n)>`.
    pub fn gradients(
        &self,
        v_n: &VideoTensor,
        a_n: &AudioTensor,
        n: usize,
        cotangent: &DenoiserOutput,
    ) -> Result<(ToyNetGrads, VideoTensor, AudioTensor)> {
        self.check_inputs(v_n, a_n, n)?;
        self.config.shapes.check(&cotangent.video, &cotangent.audio)?;
        let cache = self.forward(v_n, a_n, n)?;
        let cot = PairShape::join(&cotangent.video, &cotangent.audio);
        let mut grads = ToyNetGrads::zeros_like(self);
        let (gv, ga) = self
            .backward_into(&cache, &cot, 1.0, &mut grads, true)
            .expect("input gradient requested");
        Ok((grads, gv, ga))
    }

    fn fused_input_grad(&self, gx: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let shapes = self.config.shapes;
        let [f, cv, h, w] = shapes.video;
        let [t, ca] = shapes.audio;
        let fv_len = f * (cv + ca) * h * w;
        let fa_len = t * (ca + cv);
        easy_fuse_vjp(shapes.video, shapes.audio, &gx[..fv_len], &gx[fv_len..fv_len + fa_len])
    }

    /// Predict a batch of inputs in parallel; output order matches input order.
    pub fn predict_batch(
        &self,
        inputs: &[(VideoTensor, AudioTensor)],
        n: usize,
    ) -> Result<Vec<DenoiserOutput>> {
        inputs.par_iter().map(|(v, a)| self.predict(v, a, n)).collect()
    }
}

impl Denoiser for ToyNet {
    fn shapes(&self) -> PairShape {
        self.config.shapes
    }

    fn num_steps(&self) -> usize {
        self.config.steps
    }

    fn predict(&self, v_n: &VideoTensor, a_n: &AudioTensor, n: usize) -> Result<DenoiserOutput> {
        self.check_inputs(v_n, a_n, n)?;
        let cache = self.forward(v_n, a_n, n)?;
        self.split_output(cache.output)
    }

    fn supports_input_gradients(&self) -> bool {
        true
    }

    fn input_gradients(
        &self,
        v_n: &VideoTensor,
        a_n: &AudioTensor,
        n: usize,
        cotangent: &DenoiserOutput,
    ) -> Result<(VideoTensor, AudioTensor)> {
        self.check_inputs(v_n, a_n, n)?;
        self.config.shapes.check(&cotangent.video, &cotangent.audio)?;
        let cache = self.forward(v_n, a_n, n)?;
        let cot = PairShape::join(&cotangent.video, &cotangent.audio);
        // parameter grads are discarded here
        let mut scratch = ToyNetGrads::zeros_like(self);
        Ok(self
            .backward_into(&cache, &cot, 1.0, &mut scratch, true)
            .expect("input gradient requested"))
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Header fields stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub schedule: ScheduleDescriptor,
    pub seed: u64,
    pub train_step: usize,
}

fn join_dims(d: &[usize]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| Error::Format(format!("bad dimension `{x}`"))))
        .collect()
}

/// Layout: `CMCK | u16 version | u32 header length | key=value header |
/// u32 tensor count | tensor dumps (weight, bias per layer)`.
pub fn write_checkpoint<W: Write>(w: &mut W, net: &ToyNet, meta: &CheckpointMeta) -> Result<()> {
    let c = &net.config;
    let header = format!(
        "format={CHECKPOINT_VERSION}\nvideo={}\naudio={}\nhidden={}\nskip={}\nsteps={}\nschedule={}\nseed={}\ntrain_step={}\n",
        join_dims(&c.shapes.video),
        join_dims(&c.shapes.audio),
        join_dims(&c.hidden),
        u8::from(c.skip),
        c.steps,
        meta.schedule,
        meta.seed,
        meta.train_step,
    );
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&((net.layers.len() * 2) as u32).to_le_bytes())?;
    for l in &net.layers {
        write_tensor(w, &Tensor::new(vec![l.outputs, l.inputs], l.weight.clone())?)?;
        write_tensor(w, &Tensor::new(vec![l.outputs], l.bias.clone())?)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ToyNet, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    if u16::from_le_bytes(b2) != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            u16::from_le_bytes(b2)
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let mut header = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| Error::Format("header not UTF-8".into()))?;
    let get = |key: &str| -> Result<&str> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
            .ok_or_else(|| Error::Format(format!("checkpoint header missing `{key}`")))
    };
    let video = parse_dims(get("video")?)?;
    let audio = parse_dims(get("audio")?)?;
    if video.len() != 4 || audio.len() != 2 {
        return Err(Error::Format("bad modality shapes in checkpoint".into()));
    }
    let num = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("bad `{key}` in checkpoint header")))
    };
    let config = ToyNetConfig {
        shapes: PairShape {
            video: [video[0], video[1], video[2], video[3]],
            audio: [audio[0], audio[1]],
        },
        hidden: parse_dims(get("hidden")?)?,
        steps: num("steps")? as usize,
        skip: match get("skip")? {
            "0" => false,
            "1" => true,
            other => return Err(Error::Format(format!("bad `skip` value `{other}`"))),
        },
    };
    let meta = CheckpointMeta {
        schedule: ScheduleDescriptor::parse(get("schedule")?)?,
        seed: num("seed")?,
        train_step: num("train_step")? as usize,
    };
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut net = ToyNet::zeros(config);
    if count != net.layers.len() * 2 {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config needs {}",
            net.layers.len() * 2
        )));
    }
    for l in &mut net.layers {
        let w = read_tensor(r)?;
        let b = read_tensor(r)?;
        if w.shape() != [l.outputs, l.inputs] || b.shape() != [l.outputs] {
            return Err(Error::Format("layer tensor shape mismatch".into()));
        }
        l.weight = w.into_data();
        l.bias = b.into_data();
    }
    Ok((net, meta))
}

pub fn save_checkpoint(path: &Path, net: &ToyNet, meta: &CheckpointMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, net, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyNet, CheckpointMeta)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::gaussian_like;
    use crate::schedule::NoiseSchedule;

    fn config(hidden: Vec<usize>) -> ToyNetConfig {
        ToyNetConfig {
            shapes: PairShape {
                video: [3, 2, 2, 2],
                audio: [7, 3],
            },
            hidden,
            steps: 1000,
            skip: true,
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = ToyNet::zeros(config(vec![8]));
        let p = net.shapes().zeros();
        let out = net.predict(&p.video, &p.audio, 10).unwrap();
        assert!(out.video.data().iter().chain(out.audio.data()).all(|&x| x == 0.0));
        let mut rng = stream_rng(0, 0);
        let v = gaussian_like(&p.video, &mut rng);
        let out = net.predict(&v, &p.audio, 500).unwrap();
        assert!(out.video.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_shapes_follow_config() {
        let net = ToyNet::new(config(vec![5, 4]), 1);
        let p = net.shapes().zeros();
        let out = net.predict(&p.video, &p.audio, 1).unwrap();
        assert_eq!(out.video.dims(), [3, 2, 2, 2]);
        assert_eq!(out.audio.dims(), [7, 3]);
        assert_eq!(net.config().input_len(), 3 * 5 * 4 + 7 * 5 + TIME_FEATURES);
    }

    /// Independent forward pass written directly from the layer definitions.
    fn reference_forward(net: &ToyNet, x: &[f64], native: &[f64], n: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let n_layers = net.layers().len() - 1;
        for (i, l) in net.layers()[..n_layers].iter().enumerate() {
            let mut z = vec![0.0; l.outputs];
            for j in 0..l.outputs {
                let mut s = l.bias[j];
                for k in 0..l.inputs {
                    s += l.weight[j * l.inputs + k] * h[k];
                }
                z[j] = if i + 1 < n_layers { s.tanh() } else { s };
            }
            h = z;
        }
        let gate = net.layers().last().unwrap();
        let t = time_features(n, 1000);
        let lv = net.shapes().video_len();
        for (i, o) in h.iter_mut().enumerate() {
            let m = usize::from(i >= lv);
            let g: f64 = gate.bias[m] + (0..TIME_FEATURES).map(|k| gate.weight[m * TIME_FEATURES + k] * t[k]).sum::<f64>();
            *o += g * native[i];
        }
        h
    }

    #[test]
    fn doubling_hidden_weights_matches_reference() {
        let mut net = ToyNet::new(config(vec![6, 5]), 2);
        let mut rng = stream_rng(2, 1);
        let p = net.shapes().zeros();
        let v = gaussian_like(&p.video, &mut rng);
        let a = gaussian_like(&p.audio, &mut rng);
        let x = net.input_vector(&v, &a, 321).unwrap();
        net.layers_mut()[1].weight.iter_mut().for_each(|w| *w *= 2.0);
        let mut gate_rng = stream_rng(2, 2);
        let gate = net.layers_mut().last_mut().unwrap();
        gate.weight = gaussian_vec(gate.weight.len(), &mut gate_rng);
        gate.bias = vec![0.3, -0.7];
        let got = net.predict(&v, &a, 321).unwrap();
        let want = reference_forward(&net, &x, &PairShape::join(&v, &a), 321);
        for (g, w) in PairShape::join(&got.video, &got.audio).iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = ToyNet::new(config(vec![4]), 3);
        let p = net.shapes().zeros();
        let cot = DenoiserOutput { video: p.video.clone(), audio: p.audio.clone() };
        let mut rng = stream_rng(3, 1);
        let v = gaussian_like(&p.video, &mut rng);
        let (g, gv, ga) = net.gradients(&v, &p.audio, 7, &cot).unwrap();
        assert!(g.flat().iter().all(|&x| x == 0.0));
        assert!(gv.data().iter().chain(ga.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn time_features_are_bounded_and_smooth() {
        let a = time_features(500, 1000);
        let b = time_features(501, 1000);
        assert!(a.iter().all(|x| x.abs() <= 1.0));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 0.6));
        assert_eq!(time_features(0, 1000)[1], 1.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = ToyNet::new(config(vec![4, 3]), 5);
        let meta = CheckpointMeta {
            schedule: NoiseSchedule::default().descriptor(),
            seed: 5,
            train_step: 42,
        };
        let mut first = Vec::new();
        write_checkpoint(&mut first, &net, &meta).unwrap();
        let (loaded, meta_back) = read_checkpoint(&mut first.as_slice()).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(loaded.config(), net.config());
        for (a, b) in loaded.layers().iter().zip(net.layers()) {
            for (x, y) in a.weight.iter().zip(&b.weight) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let mut second = Vec::new();
        write_checkpoint(&mut second, &loaded, &meta_back).unwrap();
        assert_eq!(first, second);
        let (again, _) = read_checkpoint(&mut second.as_slice()).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(read_checkpoint(&mut &b"nope"[..]).is_err());
    }
}
