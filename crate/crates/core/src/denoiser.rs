//! The joint v-prediction interface `v_theta(v_n, a_n, n)` and the closed-form
//! MMSE denoiser for jointly Gaussian data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{gaussian_vec, ModalPair};
use crate::schedule::NoiseSchedule;
use crate::tensor::{AudioTensor, Dense, VideoTensor};

/// Shapes of one modality pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairShape {
    pub video: [usize; 4],
    pub audio: [usize; 2],
}

impl PairShape {
    pub fn video_len(&self) -> usize {
        self.video.iter().product()
    }

    pub fn audio_len(&self) -> usize {
        self.audio.iter().product()
    }

    pub fn total_len(&self) -> usize {
        self.video_len() + self.audio_len()
    }

    pub fn zeros(&self) -> ModalPair {
        ModalPair {
            video: VideoTensor::zeros(self.video),
            audio: AudioTensor::zeros(self.audio),
        }
    }

    pub fn check(&self, v: &VideoTensor, a: &AudioTensor) -> Result<()> {
        if v.dims() != self.video || a.dims() != self.audio {
            return Err(Error::shape(format!(
                "expected video {:?} / audio {:?}, got {:?} / {:?}",
                self.video,
                self.audio,
                v.dims(),
                a.dims()
            )));
        }
        Ok(())
    }

    /// Split a flat `[video | audio]` vector into modality tensors.
    pub fn split(&self, flat: Vec<f64>) -> Result<(VideoTensor, AudioTensor)> {
        if flat.len() != self.total_len() {
            return Err(Error::shape(format!(
                "flat vector has {} elements, expected {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut video = flat;
        let audio = video.split_off(self.video_len());
        Ok((
            VideoTensor::new(self.video, video)?,
            AudioTensor::new(self.audio, audio)?,
        ))
    }

    pub fn join(v: &VideoTensor, a: &AudioTensor) -> Vec<f64> {
        let mut flat = Vec::with_capacity(v.len() + a.len());
        flat.extend_from_slice(v.data());
        flat.extend_from_slice(a.data());
        flat
    }
}

/// v-predictions for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub video: VideoTensor,
    pub audio: AudioTensor,
}

pub trait Denoiser: Sync {
    fn shapes(&self) -> PairShape;

    /// Number of training diffusion steps `N` the model is conditioned on.
    fn num_steps(&self) -> usize;

    fn predict(&self, v_n: &VideoTensor, a_n: &AudioTensor, n: usize) -> Result<DenoiserOutput>;

    fn supports_input_gradients(&self) -> bool {
        false
    }

    /// Vector-Jacobian product of `predict` w.r.t. its two noisy inputs.
    fn input_gradients(
        &self,
        _v_n: &VideoTensor,
        _a_n: &AudioTensor,
        _n: usize,
        _cotangent: &DenoiserOutput,
    ) -> Result<(VideoTensor, AudioTensor)> {
        Err(Error::Capability(
            "denoiser does not provide input gradients".into(),
        ))
    }

    fn check_inputs(&self, v_n: &VideoTensor, a_n: &AudioTensor, n: usize) -> Result<()> {
        self.shapes().check(v_n, a_n)?;
        if n == 0 || n > self.num_steps() {
            return Err(Error::invalid(format!(
                "step {n} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

/// Jointly Gaussian data model over the flattened `[video | audio]` vector.
#[derive(Clone, Debug)]
pub struct GaussianWorld {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    identity: bool,
}

impl GaussianWorld {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.nrows() != d || sigma.ncols() != d || d == 0 {
            return Err(Error::shape(format!(
                "mean has {d} entries but covariance is {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-10 {
            return Err(Error::invalid(format!("covariance not symmetric ({asym:e})")));
        }
        let eig = SymmetricEigen::new(sigma.clone());
        if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l <= 0.0) {
            return Err(Error::invalid(format!(
                "covariance not positive definite (eigenvalue {bad:e})"
            )));
        }
        let identity = sigma == DMatrix::identity(d, d);
        Ok(Self {
            mu,
            sigma,
            eigvals: eig.eigenvalues,
            eigvecs: eig.eigenvectors,
            identity,
        })
    }

    pub fn standard(d: usize) -> Result<Self> {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d))
    }

    /// Unit-variance blocks of sizes `d_v` and `d_a` where coordinate `i` of
    /// each block is correlated with coordinate `i` of the other by `rho`.
    pub fn correlated_blocks(d_v: usize, d_a: usize, rho: f64, mu: DVector<f64>) -> Result<Self> {
        if rho.abs() >= 1.0 {
            return Err(Error::invalid(format!("|rho| must be < 1, got {rho}")));
        }
        let d = d_v + d_a;
        let mut sigma = DMatrix::identity(d, d);
        for i in 0..d_v.min(d_a) {
            sigma[(i, d_v + i)] = rho;
            sigma[(d_v + i, i)] = rho;
        }
        Self::new(mu, sigma)
    }

    /// Random SPD covariance `A A^T / d + floor I` and mean with entries in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(d: usize, floor: f64, rng: &mut R) -> Result<Self> {
        let a = DMatrix::from_vec(d, d, gaussian_vec(d * d, rng));
        let sigma = (&a * a.transpose()) / d as f64 + DMatrix::identity(d, d) * floor;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let mu = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        Self::new(mu, sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Draw one sample `mu + Q sqrt(Lambda) z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_vec(gaussian_vec(self.dim(), rng));
        let scaled = z.component_mul(&self.eigvals.map(f64::sqrt));
        &self.mu + &self.eigvecs * scaled
    }

    /// `E[x_free | x_known = values]` where `known` is a contiguous index range.
    pub fn conditional_mean(&self, known: std::ops::Range<usize>, values: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if known.end > d || known.len() != values.len() || known.is_empty() {
            return Err(Error::shape("conditioning range does not fit the world"));
        }
        let free: Vec<usize> = (0..d).filter(|i| !known.contains(i)).collect();
        let k: Vec<usize> = known.clone().collect();
        let s_kk = DMatrix::from_fn(k.len(), k.len(), |i, j| self.sigma[(k[i], k[j])]);
        let s_fk = DMatrix::from_fn(free.len(), k.len(), |i, j| self.sigma[(free[i], k[j])]);
        let resid = DVector::from_fn(k.len(), |i, _| values[i] - self.mu[k[i]]);
        let chol = s_kk
            .cholesky()
            .ok_or_else(|| Error::Numerical("conditioning block not SPD".into()))?;
        let shift = s_fk * chol.solve(&resid);
        Ok(free
            .iter()
            .enumerate()
            .map(|(i, &fi)| self.mu[fi] + shift[i])
            .collect())
    }

    /// `Q diag(gain(lambda)) Q^T y`.
    fn spectral_apply(&self, y: &DVector<f64>, gain: impl Fn(f64) -> f64) -> DVector<f64> {
        let proj = self.eigvecs.tr_mul(y);
        let scaled = DVector::from_fn(proj.len(), |i, _| proj[i] * gain(self.eigvals[i]));
        &self.eigvecs * scaled
    }

    /// Posterior-mean gain `sqrt(abar) Sigma (abar Sigma + (1 - abar) I)^-1`
    /// applied to `y`.
    fn posterior_gain(&self, y: &DVector<f64>, abar: f64) -> DVector<f64> {
        let sa = abar.sqrt();
        if self.identity {
            return y * sa;
        }
        self.spectral_apply(y, |l| sa * l / (abar * l + (1.0 - abar)))
    }
}

/// `E[x0 | x_n] = mu + sqrt(abar) Sigma (abar Sigma + (1 - abar) I)^-1 (x_n - sqrt(abar) mu)`.
pub fn analytic_posterior_mean(world: &GaussianWorld, x_n: &[f64], abar: f64) -> Result<Vec<f64>> {
    if x_n.len() != world.dim() {
        return Err(Error::shape(format!(
            "x_n has {} entries, world has {}",
            x_n.len(),
            world.dim()
        )));
    }
    if !(abar > 0.0 && abar <= 1.0) {
        return Err(Error::invalid(format!("alpha_bar {abar} outside (0, 1]")));
    }
    let y = DVector::from_column_slice(x_n) - &world.mu * abar.sqrt();
    Ok((&world.mu + world.posterior_gain(&y, abar)).as_slice().to_vec())
}

/// Exact MMSE v-predictor for data drawn from a [`GaussianWorld`].
#[derive(Clone, Debug)]
pub struct AnalyticGaussianDenoiser {
    world: GaussianWorld,
    schedule: NoiseSchedule,
    shapes: PairShape,
}

impl AnalyticGaussianDenoiser {
    pub fn new(world: GaussianWorld, schedule: NoiseSchedule, shapes: PairShape) -> Result<Self> {
        if world.dim() != shapes.total_len() {
            return Err(Error::shape(format!(
                "world dimension {} != video {} + audio {}",
                world.dim(),
                shapes.video_len(),
                shapes.audio_len()
            )));
        }
        Ok(Self {
            world,
            schedule,
            shapes,
        })
    }

    pub fn world(&self) -> &GaussianWorld {
        &self.world
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn shapes(&self) -> PairShape {
        self.shapes
    }

    fn num_steps(&self) -> usize {
        self.schedule.steps()
    }

    fn predict(&self, v_n: &VideoTensor, a_n: &AudioTensor, n: usize) -> Result<DenoiserOutput> {
        self.check_inputs(v_n, a_n, n)?;
        let abar = self.schedule.alpha_bar(n);
        let x_n = PairShape::join(v_n, a_n);
        let x0 = analytic_posterior_mean(&self.world, &x_n, abar)?;
        // v_hat = (sqrt(abar) x_n - x0_hat) / sqrt(1 - abar)
        let (sa, s1) = (abar.sqrt(), (1.0 - abar).sqrt());
        let v: Vec<f64> = x_n.iter().zip(&x0).map(|(x, m)| (sa * x - m) / s1).collect();
        let (video, audio) = self.shapes.split(v)?;
        Ok(DenoiserOutput { video, audio })
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
        self.shapes.check(&cotangent.video, &cotangent.audio)?;
        let abar = self.schedule.alpha_bar(n);
        let (sa, s1) = (abar.sqrt(), (1.0 - abar).sqrt());
        // d v_hat / d x_n = (sqrt(abar) I - G) / sqrt(1 - abar), G symmetric
        let c = DVector::from_vec(PairShape::join(&cotangent.video, &cotangent.audio));
        let gc = self.world.posterior_gain(&c, abar);
        let g: Vec<f64> = c.iter().zip(gc.iter()).map(|(c, gc)| (sa * c - gc) / s1).collect();
        self.shapes.split(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::stream_rng;

    fn small_shape() -> PairShape {
        PairShape {
            video: [2, 1, 1, 2],
            audio: [4, 1],
        }
    }

    #[test]
    fn posterior_mean_scalar_hand_case() {
        let world = GaussianWorld::new(DVector::from_element(1, 2.0), DMatrix::from_element(1, 1, 4.0)).unwrap();
        let m = analytic_posterior_mean(&world, &[1.0], 0.5).unwrap()[0];
        let hand = 2.0 + (0.5f64.sqrt() * 4.0 / (0.5 * 4.0 + 0.5)) * (1.0 - 0.5f64.sqrt() * 2.0);
        assert!((m - hand).abs() < 1e-14);
        assert!((m - 1.531).abs() < 1e-3);
    }

    #[test]
    fn posterior_mean_identity_collapses() {
        let world = GaussianWorld::standard(3).unwrap();
        let m = analytic_posterior_mean(&world, &[1.0, -2.0, 0.5], 0.64).unwrap();
        assert_eq!(m, vec![0.8, -1.6, 0.4]);
    }

    #[test]
    fn posterior_mean_no_noise_limit() {
        let mut rng = stream_rng(2, 0);
        let world = GaussianWorld::random(5, 0.2, &mut rng).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, -0.7];
        let m = analytic_posterior_mean(&world, &x, 1.0 - 1e-9).unwrap();
        for (a, b) in m.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn posterior_mean_is_affine_superposition() {
        // linear part: m(x + y) - m(0) = (m(x) - m(0)) + (m(y) - m(0))
        let mut rng = stream_rng(3, 0);
        let world = GaussianWorld::random(4, 0.1, &mut rng).unwrap();
        let x = [1.0, 0.2, -0.3, 0.5];
        let y = [-0.4, 2.0, 0.1, 0.0];
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let m = |v: &[f64]| analytic_posterior_mean(&world, v, 0.4).unwrap();
        let m0 = m(&[0.0; 4]);
        let (mx, my, mxy) = (m(&x), m(&y), m(&xy));
        for i in 0..4 {
            assert!(((mxy[i] - m0[i]) - (mx[i] - m0[i]) - (my[i] - m0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_mean_matches_monte_carlo_regression() {
        // Oracle: empirical E[x0 | x_n] by linear regression on 200k joint draws.
        let d = 6;
        let abar: f64 = 0.45;
        let mut rng = stream_rng(17, 0);
        let world = GaussianWorld::random(d, 0.1, &mut rng).unwrap();
        let draws = 200_000;
        let (sa, s1) = (abar.sqrt(), (1.0f64 - abar).sqrt());
        let mut sum_x0 = DVector::zeros(d);
        let mut sum_xn = DVector::zeros(d);
        let mut s_xn = DMatrix::zeros(d, d);
        let mut s_x0xn = DMatrix::zeros(d, d);
        for _ in 0..draws {
            let x0 = world.sample(&mut rng);
            let eps = DVector::from_vec(gaussian_vec(d, &mut rng));
            let xn = &x0 * sa + eps * s1;
            s_xn += &xn * xn.transpose();
            s_x0xn += &x0 * xn.transpose();
            sum_x0 += x0;
            sum_xn += xn;
        }
        let m = draws as f64;
        let (m0, mn) = (sum_x0 / m, sum_xn / m);
        let cov_nn = s_xn / m - &mn * mn.transpose();
        let cov_0n = s_x0xn / m - &m0 * mn.transpose();
        let query = DVector::from_vec(vec![0.5, -1.0, 0.8, 0.0, 1.2, -0.3]);
        let mc = &m0 + cov_0n * cov_nn.try_inverse().unwrap() * (&query - &mn);
        let exact = DVector::from_vec(analytic_posterior_mean(&world, query.as_slice(), abar).unwrap());
        let rel = (&mc - &exact).norm() / exact.norm();
        assert!(rel < 0.01, "relative error {rel}");
    }

    #[test]
    fn analytic_denoiser_identity_world_predicts_zero_velocity() {
        // For mu = 0, sigma = I, x0_hat = sqrt(abar) x_n and eps_hat = sqrt(1-abar) x_n,
        // so v_hat = sqrt(abar) eps_hat - sqrt(1-abar) x0_hat = 0.
        let shapes = small_shape();
        let den = AnalyticGaussianDenoiser::new(GaussianWorld::standard(8).unwrap(), NoiseSchedule::default(), shapes).unwrap();
        let mut rng = stream_rng(1, 0);
        let (v, a) = shapes.split(gaussian_vec(8, &mut rng)).unwrap();
        let out = den.predict(&v, &a, 300).unwrap();
        assert!(out.video.data().iter().chain(out.audio.data()).all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn analytic_denoiser_scalar_posterior() {
        let shapes = PairShape { video: [1, 1, 1, 1], audio: [1, 1] };
        let world = GaussianWorld::new(DVector::from_vec(vec![2.0, -1.0]), DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.5]))).unwrap();
        let schedule = NoiseSchedule::default();
        let den = AnalyticGaussianDenoiser::new(world, schedule.clone(), shapes).unwrap();
        let n = 400;
        let abar = schedule.alpha_bar(n);
        let out = den
            .predict(&VideoTensor::new([1, 1, 1, 1], vec![1.0]).unwrap(), &AudioTensor::new([1, 1], vec![0.5]).unwrap(), n)
            .unwrap();
        for (x, mu, var, got) in [(1.0, 2.0, 4.0, out.video.data()[0]), (0.5, -1.0, 0.5, out.audio.data()[0])] {
            let post = mu + abar.sqrt() * var / (abar * var + 1.0 - abar) * (x - abar.sqrt() * mu);
            let eps = (x - abar.sqrt() * post) / (1.0 - abar).sqrt();
            let v = abar.sqrt() * eps - (1.0 - abar).sqrt() * post;
            assert!((got - v).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_input_gradients_match_finite_differences() {
        let shapes = small_shape();
        let mut rng = stream_rng(8, 0);
        let world = GaussianWorld::random(8, 0.2, &mut rng).unwrap();
        let den = AnalyticGaussianDenoiser::new(world, NoiseSchedule::default(), shapes).unwrap();
        let (v, a) = shapes.split(gaussian_vec(8, &mut rng)).unwrap();
        let (cv, ca) = shapes.split(gaussian_vec(8, &mut rng)).unwrap();
        let cot = DenoiserOutput { video: cv, audio: ca };
        let n = 250;
        let (gv, ga) = den.input_gradients(&v, &a, n, &cot).unwrap();
        let grad = PairShape::join(&gv, &ga);
        let x = PairShape::join(&v, &a);
        let f = |x: &[f64]| {
            let (v, a) = shapes.split(x.to_vec()).unwrap();
            let out = den.predict(&v, &a, n).unwrap();
            PairShape::join(&out.video, &out.audio)
                .iter()
                .zip(PairShape::join(&cot.video, &cot.audio))
                .map(|(o, c)| o * c)
                .sum::<f64>()
        };
        for i in 0..8 {
            let h = 1e-5;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn conditional_mean_of_block_world() {
        let world = GaussianWorld::correlated_blocks(2, 2, 0.9, DVector::from_vec(vec![0.0, 0.0, 1.0, -1.0])).unwrap();
        let m = world.conditional_mean(0..2, &[1.0, 2.0]).unwrap();
        assert!((m[0] - (1.0 + 0.9)).abs() < 1e-12);
        assert!((m[1] - (-1.0 + 1.8)).abs() < 1e-12);
    }

    #[test]
    fn world_validation() {
        assert!(GaussianWorld::new(DVector::zeros(2), DMatrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0])).is_err());
        assert!(GaussianWorld::new(DVector::zeros(2), DMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(GaussianWorld::correlated_blocks(2, 2, 1.0, DVector::zeros(4)).is_err());
        let shapes = small_shape();
        assert!(AnalyticGaussianDenoiser::new(GaussianWorld::standard(7).unwrap(), NoiseSchedule::default(), shapes).is_err());
    }

    #[test]
    fn predict_rejects_bad_step_and_shape() {
        let shapes = small_shape();
        let den = AnalyticGaussianDenoiser::new(GaussianWorld::standard(8).unwrap(), NoiseSchedule::default(), shapes).unwrap();
        let p = shapes.zeros();
        assert!(den.predict(&p.video, &p.audio, 0).is_err());
        assert!(den.predict(&p.video, &p.audio, 1001).is_err());
        assert!(den.predict(&p.video, &AudioTensor::zeros([3, 1]), 5).is_err());
    }
}
