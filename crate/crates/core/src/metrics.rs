//! Distribution distances over embedding sets: Fréchet distance between
//! fitted Gaussians and an unbiased polynomial-kernel MMD.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::forward::{gaussian_vec, stream_rng};
use crate::tensor::{Dense, Tensor};
use crate::{Error, Result};

/// Eigenvalues above `-EIGEN_CLIP` are treated as zero before a square root.
pub const EIGEN_CLIP: f64 = 1e-8;

/// `M` embedding vectors of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if data.len() % dim != 0 {
            return Err(Error::shape(format!(
                "{} values do not split into rows of {dim}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite embedding value {bad}")));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("embedding rows differ in length"));
        }
        Self::new(dim, rows.concat())
    }

    /// A rank-2 tensor `(M, d)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [_, d] => Self::new(*d, t.data().to_vec()),
            other => Err(Error::shape(format!("embeddings need rank 2, got {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.data.clone()).expect("consistent shape")
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Rows `idx` of this set, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { dim: self.dim, data }
    }

    /// Stack two sets of equal dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::shape(format!("dimension {} vs {}", self.dim, other.dim)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self { dim: self.dim, data })
    }
}

/// Mean and unbiased covariance of an embedding set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(Error::shape(format!(
                "covariance {:?} does not match mean of length {d}",
                sigma.shape()
            )));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-9 * scale {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub fn fit_gaussian(set: &EmbeddingSet) -> Result<GaussianStats> {
    let m = set.len();
    if m < 2 {
        return Err(Error::invalid(format!("need at least 2 embeddings to fit a covariance, got {m}")));
    }
    let d = set.dim();
    let x = DMatrix::from_row_slice(m, d, &set.data);
    let mu = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
    let centred = DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mu[j]);
    let mut sigma = centred.transpose() * &centred / (m as f64 - 1.0);
    // exact symmetry
    sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma })
}

/// Eigenvalues of a symmetric matrix with tiny negatives clipped to zero.
fn clipped_eigen(a: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (a + a.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    for l in eig.eigenvalues.iter_mut() {
        if *l < 0.0 {
            if *l < -EIGEN_CLIP * scale {
                return Err(Error::Numerical(format!(
                    "square root of {what} failed: eigenvalue {l:e} is negative"
                )));
            }
            *l = 0.0;
        }
    }
    Ok(eig)
}

fn sqrt_psd(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clipped_eigen(a, what)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2))`.
///
/// The cross term uses the eigenvalues of `S_p^(1/2) S_q S_p^(1/2)`, which
/// share their square roots' trace with `(S_p S_q)^(1/2)` and stay symmetric.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape(format!("dimension {} vs {}", p.dim(), q.dim())));
    }
    let root_p = sqrt_psd(&p.sigma, "the first covariance")?;
    let middle = &root_p * &q.sigma * &root_p;
    let eig = clipped_eigen(&middle, "the covariance product")?;
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let mean_term = (&p.mu - &q.mu).norm_squared();
    let d = mean_term + p.sigma.trace() + q.sigma.trace() - 2.0 * cross;
    // round-off can leave a tiny negative
    Ok(d.max(0.0))
}

/// Fréchet distance of one clip's embedding frames against reference stats.
pub fn per_sample_frechet(sample: &EmbeddingSet, reference: &GaussianStats) -> Result<f64> {
    if sample.len() < 2 {
        return Err(Error::invalid(format!(
            "a clip needs at least 2 embedding frames, got {}",
            sample.len()
        )));
    }
    frechet_distance(&fit_gaussian(sample)?, reference)
}

/// `(u.w / d + 1)^3`.
pub fn polynomial_kernel(u: &[f64], w: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    (dot / u.len() as f64 + 1.0).powi(3)
}

fn kernel_sum(x: &EmbeddingSet, y: &EmbeddingSet, skip_diagonal: bool) -> f64 {
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let u = x.row(i);
            (0..y.len())
                .filter(|&j| !(skip_diagonal && i == j))
                .map(|j| polynomial_kernel(u, y.row(j)))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Unbiased MMD^2 estimate with the cubic polynomial kernel.
pub fn kernel_distance(x: &EmbeddingSet, y: &EmbeddingSet) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("dimension {} vs {}", x.dim(), y.dim())));
    }
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples per set, got {m} and {n}")));
    }
    let (mf, nf) = (m as f64, n as f64);
    let kxx = kernel_sum(x, x, true) / (mf * (mf - 1.0));
    let kyy = kernel_sum(y, y, true) / (nf * (nf - 1.0));
    let kxy = kernel_sum(x, y, false) / (mf * nf);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Frozen random features: `tanh(x W)` with `W` Gaussian, scaled `1/sqrt(d)`.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    input_dim: usize,
    dim: usize,
    /// `(input_dim, dim)`, row-major.
    weight: Vec<f64>,
}

impl RandomProjection {
    pub fn new(input_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || dim == 0 {
            return Err(Error::invalid("projection dimensions must be positive"));
        }
        let scale = (dim as f64).sqrt().recip();
        let weight = gaussian_vec(input_dim * dim, &mut stream_rng(seed, 0))
            .into_iter()
            .map(|w| w * scale)
            .collect();
        Ok(Self { input_dim, dim, weight })
    }

    pub fn embed_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (xi, row) in x.iter().zip(self.weight.chunks_exact(self.dim)) {
            out.iter_mut().zip(row).for_each(|(o, w)| *o += xi * w);
        }
        out.iter_mut().for_each(|o| *o = o.tanh());
        out
    }

    /// Embed each row of a `(T, input_dim)` tensor.
    pub fn embed(&self, frames: &Tensor) -> Result<EmbeddingSet> {
        let t = match frames.shape() {
            [t, d] if *d == self.input_dim => *t,
            other => {
                return Err(Error::shape(format!(
                    "expected frames of shape (T, {}), got {other:?}",
                    self.input_dim
                )))
            }
        };
        let data = (0..t).flat_map(|i| self.embed_row(frames.row(i))).collect();
        EmbeddingSet::new(self.dim, data)
    }
}

pub fn random_projection_embedder(frames: &Tensor, dim: usize, seed: u64) -> Result<EmbeddingSet> {
    let input_dim = *frames.shape().last().unwrap_or(&0);
    RandomProjection::new(input_dim, dim, seed)?.embed(frames)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub set_sizes: (usize, usize),
    pub seed: u64,
}

impl MetricReport {
    /// `metric, value, set_sizes, seed`, with sizes written `MxN`.
    pub fn line(&self) -> String {
        format!(
            "{}, {:e}, {}x{}, {}",
            self.metric, self.value, self.set_sizes.0, self.set_sizes.1, self.seed
        )
    }
}
