//! Dense row-major arrays and the shape primitives used by easy fusion.
//!
//! Video tensors are laid out `(frames, channels, height, width)` and audio
//! tensors `(timesteps, channels)`. In both cases axis 0 is time and axis 1 is
//! channels, so the temporal and channel primitives below are rank-agnostic.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Common read access for every dense tensor type.
pub trait Dense: Clone {
    fn shape(&self) -> &[usize];
    fn data(&self) -> &[f64];
    /// Same shape, new payload. The payload length must match.
    fn with_data(&self, data: Vec<f64>) -> Self;

    fn len(&self) -> usize {
        self.data().len()
    }

    fn is_empty(&self) -> bool {
        self.data().is_empty()
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("degenerate shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Length of axis 0.
    pub fn time_len(&self) -> usize {
        self.shape[0]
    }

    /// Length of axis 1, or 1 for rank-1 tensors.
    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Number of elements in one time slice.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Number of elements per channel within one time slice (spatial size).
    fn plane_len(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let r = self.row_len();
        &self.data[t * r..(t + 1) * r]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }
}

impl Dense for Tensor {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> &[f64] {
        &self.data
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "payload length changed");
        Self {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// Video tensor `(F, C_v, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor(Tensor);

/// Audio tensor `(T, C_a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTensor(Tensor);

impl VideoTensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape.to_vec(), data).map(Self)
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self(Tensor::zeros(&shape).expect("video shape has zero dimension"))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape(format!(
                "video tensor must be rank 4, got {:?}",
                t.shape
            )));
        }
        Ok(Self(t))
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = &self.0.shape;
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frames(&self) -> usize {
        self.0.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape[1]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Mean over the spatial plane of frame `f`, all channels.
    pub fn frame_mean(&self, f: usize) -> f64 {
        let row = self.0.row(f);
        row.iter().sum::<f64>() / row.len() as f64
    }
}

impl AudioTensor {
    pub fn new(shape: [usize; 2], data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape.to_vec(), data).map(Self)
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        Self(Tensor::zeros(&shape).expect("audio shape has zero dimension"))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape(format!(
                "audio tensor must be rank 2, got {:?}",
                t.shape
            )));
        }
        Ok(Self(t))
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.0.shape[0], self.0.shape[1]]
    }

    pub fn steps(&self) -> usize {
        self.0.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape[1]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Mean over channels at timestep `t`.
    pub fn column_mean(&self, t: usize) -> f64 {
        let row = self.0.row(t);
        row.iter().sum::<f64>() / row.len() as f64
    }
}

macro_rules! impl_dense_wrapper {
    ($ty:ty) => {
        impl Dense for $ty {
            fn shape(&self) -> &[usize] {
                self.0.shape()
            }

            fn data(&self) -> &[f64] {
                self.0.data()
            }

            fn with_data(&self, data: Vec<f64>) -> Self {
                Self(self.0.with_data(data))
            }
        }
    };
}

impl_dense_wrapper!(VideoTensor);
impl_dense_wrapper!(AudioTensor);

fn check_same_shape<T: Dense>(a: &T, b: &T) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `alpha * x + beta * y`, elementwise.
pub fn lincomb<T: Dense>(alpha: f64, x: &T, beta: f64, y: &T) -> Result<T> {
    check_same_shape(x, y)?;
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| alpha * a + beta * b)
        .collect();
    Ok(x.with_data(data))
}

pub fn scale<T: Dense>(x: &T, alpha: f64) -> T {
    x.with_data(x.data().iter().map(|v| alpha * v).collect())
}

/// Mean squared difference over all elements.
pub fn mse<T: Dense>(x: &T, y: &T) -> Result<f64> {
    check_same_shape(x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.len() as f64)
}

pub fn sq_norm<T: Dense>(x: &T) -> f64 {
    x.data().iter().map(|v| v * v).sum()
}

/// Nearest-neighbour source index for output position `i` when resampling a
/// sequence of `src_len` items to `dst_len` items.
///
/// Center-aligned: `round_half_down((i + 0.5) * src_len / dst_len - 0.5)`,
/// clamped to `[0, src_len - 1]`. Evaluated in exact integer arithmetic.
pub fn nn_index(i: usize, src_len: usize, dst_len: usize) -> usize {
    debug_assert!(src_len >= 1 && dst_len >= 1);
    // position = p / q with p = (2i + 1) * L - T, q = 2T
    let p = (2 * i as i64 + 1) * src_len as i64 - dst_len as i64;
    let q = 2 * dst_len as i64;
    // round half down: ceil(p/q - 1/2) = ceil((2p - q) / 2q)
    let num = 2 * p - q;
    let den = 2 * q;
    let idx = num.div_euclid(den) + i64::from(num.rem_euclid(den) != 0);
    idx.clamp(0, src_len as i64 - 1) as usize
}

/// Nearest-neighbour resampling along axis 0. Channels and trailing axes are
/// carried through untouched.
pub fn nn_resample_time(x: &Tensor, target_len: usize) -> Result<Tensor> {
    if target_len == 0 {
        return Err(Error::invalid("resample target length must be positive"));
    }
    let src_len = x.time_len();
    let row = x.row_len();
    let mut data = Vec::with_capacity(target_len * row);
    for i in 0..target_len {
        data.extend_from_slice(x.row(nn_index(i, src_len, target_len)));
    }
    let mut shape = x.shape.clone();
    shape[0] = target_len;
    Ok(Tensor { shape, data })
}

/// Per-frame channel features: mean over every spatial position.
pub fn spatial_mean_pool(v: &VideoTensor) -> Tensor {
    let [f, c, h, w] = v.dims();
    let plane = h * w;
    let data = v
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor {
        shape: vec![f, c],
        data,
    }
}

/// Repeat `(F, C)` features over an `H x W` plane.
pub fn broadcast_spatial(feat: &Tensor, h: usize, w: usize) -> Result<VideoTensor> {
    if feat.rank() != 2 {
        return Err(Error::shape(format!(
            "broadcast expects (F, C) features, got {:?}",
            feat.shape
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("spatial extent must be positive"));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(feat.len() * plane);
    for &v in &feat.data {
        data.extend(std::iter::repeat_n(v, plane));
    }
    Ok(VideoTensor(Tensor {
        shape: vec![feat.shape[0], feat.shape[1], h, w],
        data,
    }))
}

/// Concatenate along axis 1. All other axes must agree.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let same_rest = a.rank() == b.rank()
        && a.rank() >= 2
        && a.shape[0] == b.shape[0]
        && a.shape[2..] == b.shape[2..];
    if !same_rest {
        return Err(Error::shape(format!(
            "cannot concat channels of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (ra, rb) = (a.row_len(), b.row_len());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for t in 0..a.time_len() {
        data.extend_from_slice(&a.data[t * ra..(t + 1) * ra]);
        data.extend_from_slice(&b.data[t * rb..(t + 1) * rb]);
    }
    let mut shape = a.shape.clone();
    shape[1] += b.shape[1];
    Ok(Tensor { shape, data })
}

/// Channels `start..end` of every time slice.
pub fn slice_channels(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    if x.rank() < 2 || start >= end || end > x.shape[1] {
        return Err(Error::shape(format!(
            "channel slice {start}..{end} out of range for {:?}",
            x.shape
        )));
    }
    let plane = x.plane_len();
    let mut data = Vec::with_capacity(x.time_len() * (end - start) * plane);
    for t in 0..x.time_len() {
        let row = x.row(t);
        data.extend_from_slice(&row[start * plane..end * plane]);
    }
    let mut shape = x.shape.clone();
    shape[1] = end - start;
    Ok(Tensor { shape, data })
}

const MAGIC: &[u8; 4] = b"CMDT";
pub const TENSOR_FORMAT_VERSION: u16 = 1;

/// Writes `CMDT | u16 version | u8 rank | u32 dims.. | f32 payload`, all
/// little-endian. The payload is narrowed to 32-bit floats.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::invalid("rank too large for tensor dump"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[t.rank() as u8])?;
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in &t.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != TENSOR_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor format version {version}"
        )));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let rank = b1[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b4 = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize, ch: usize) -> Tensor {
        let data = (0..len * ch).map(|i| i as f64 * 0.5 - 3.0).collect();
        Tensor::new(vec![len, ch], data).unwrap()
    }

    #[test]
    fn resample_identity_when_lengths_match() {
        let x = seq(4, 3);
        assert_eq!(nn_resample_time(&x, 4).unwrap(), x);
    }

    #[test]
    fn resample_duplicates_on_upsample() {
        let x = Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap();
        let y = nn_resample_time(&x, 4).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn resample_round_trip_creates_no_new_values() {
        let x = seq(112, 2);
        let down = nn_resample_time(&x, 18).unwrap();
        let up = nn_resample_time(&down, 112).unwrap();
        for t in 0..112 {
            let row = up.row(t);
            assert!((0..112).any(|s| x.row(s) == row), "row {t} not from input");
        }
    }

    #[test]
    fn resample_rejects_zero_target() {
        assert!(nn_resample_time(&seq(3, 1), 0).is_err());
    }

    #[test]
    fn nn_index_ties_go_low() {
        // 3 -> 2: positions (0.5*3/2 - 0.5) = 0.25 and (1.5*3/2 - 0.5) = 1.75
        assert_eq!(nn_index(0, 3, 2), 0);
        assert_eq!(nn_index(1, 3, 2), 2);
        // 2 -> 1: position 0.5 exactly, tie toward index 0
        assert_eq!(nn_index(0, 2, 1), 0);
    }

    #[test]
    fn zero_length_tensor_rejected() {
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn mean_pool_of_constant() {
        let v = VideoTensor::new([2, 3, 4, 5], vec![3.0; 120]).unwrap();
        let p = spatial_mean_pool(&v);
        assert_eq!(p.shape(), &[2, 3]);
        assert!(p.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn mean_pool_small_case() {
        let v = VideoTensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_mean_pool(&v).data(), &[2.5]);
    }

    #[test]
    fn mean_pool_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, c, h, w) = (3, 2, 4, 5);
        let data: Vec<f64> = (0..f * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = VideoTensor::new([f, c, h, w], data.clone()).unwrap();
        let p = spatial_mean_pool(&v);
        for fi in 0..f {
            for ci in 0..c {
                let mut s = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        s += data[((fi * c + ci) * h + hi) * w + wi];
                    }
                }
                assert!((p.data()[fi * c + ci] - s / (h * w) as f64).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn broadcast_then_pool_is_identity() {
        let feat = seq(3, 2);
        let b = broadcast_spatial(&feat, 2, 3).unwrap();
        assert_eq!(b.dims(), [3, 2, 2, 3]);
        assert_eq!(spatial_mean_pool(&b), feat);
        let sums: Vec<f64> = b.data().chunks(6).map(|p| p.iter().sum()).collect();
        for (s, f) in sums.iter().zip(feat.data()) {
            assert!((s - f * 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_single_value() {
        let feat = Tensor::new(vec![1, 1], vec![7.0]).unwrap();
        let b = broadcast_spatial(&feat, 2, 2).unwrap();
        assert_eq!(b.data(), &[7.0; 4]);
    }

    #[test]
    fn concat_shapes_and_slicing() {
        let a = Tensor::full(&[18, 4, 16, 16], 1.0).unwrap();
        let b = Tensor::full(&[18, 80, 16, 16], 2.0).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[18, 84, 16, 16]);
        assert_eq!(slice_channels(&c, 0, 4).unwrap(), a);
        assert_eq!(slice_channels(&c, 4, 84).unwrap(), b);

        let x = seq(112, 80);
        let y = seq(112, 4);
        let z = concat_channels(&x, &y).unwrap();
        assert_eq!(z.shape(), &[112, 84]);
        assert_eq!(slice_channels(&z, 0, 80).unwrap(), x);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let a = seq(4, 2);
        let b = seq(5, 2);
        assert!(matches!(concat_channels(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 4.0, 1e-3, 7.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"CMDT");
        assert_eq!(buf.len(), 4 + 2 + 1 + 8 + 24);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let mut again = Vec::new();
        write_tensor(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn dump_rejects_bad_magic() {
        let bytes = b"XXXX\x01\x00\x01\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(read_tensor(&mut &bytes[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn resample_outputs_are_input_rows(len in 1usize..40, target in 1usize..60) {
            let x = seq(len, 2);
            let y = nn_resample_time(&x, target).unwrap();
            for t in 0..target {
                prop_assert_eq!(y.row(t), x.row(nn_index(t, len, target)));
            }
            let back = nn_resample_time(&x, len).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn concat_preserves_both_operands(t in 1usize..6, ca in 1usize..4, cb in 1usize..4, h in 1usize..3) {
            let a = Tensor::new(vec![t, ca, h], (0..t * ca * h).map(|i| i as f64).collect()).unwrap();
            let b = Tensor::new(vec![t, cb, h], (0..t * cb * h).map(|i| -(i as f64)).collect()).unwrap();
            let c = concat_channels(&a, &b).unwrap();
            prop_assert_eq!(slice_channels(&c, 0, ca).unwrap(), a);
            prop_assert_eq!(slice_channels(&c, ca, ca + cb).unwrap(), b);
        }
    }
}
