//! Evaluation: Fréchet distance between Gaussian summaries of embedded
//! samples, RBF-kernel MMD and mode coverage on synthetic mixtures.
//!
//! The image embedding is a fixed-seed random convolutional network. Scores
//! computed with it are only comparable with each other, never with published
//! FID numbers.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::stats::BatchStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Identity,
    FixedRandomConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub seed: u64,
    pub out_dim: usize,
}

impl EmbeddingSpec {
    pub fn identity(dim: usize) -> Self {
        EmbeddingSpec {
            kind: EmbeddingKind::Identity,
            seed: 0,
            out_dim: dim,
        }
    }

    pub fn random_conv(seed: u64, out_dim: usize) -> Self {
        EmbeddingSpec {
            kind: EmbeddingKind::FixedRandomConv,
            seed,
            out_dim,
        }
    }
}

const EMBED_WIDTHS: [usize; 2] = [16, 32];
const EMBED_GRID: usize = 4;
const EMBED_CHUNK: usize = 256;

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, std).expect("valid std");
    Tensor::from_shape_simple_fn(IxDyn(shape), || n.sample(rng))
}

/// Averages each channel over a `grid x grid` partition of the map.
fn grid_pool(x: &Tensor, grid: usize) -> Array2<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array2::zeros((b, c * grid * grid));
    for bi in 0..b {
        for ci in 0..c {
            for gi in 0..grid {
                let (h0, h1) = (gi * h / grid, ((gi + 1) * h / grid).max(gi * h / grid + 1));
                for gj in 0..grid {
                    let (w0, w1) = (gj * w / grid, ((gj + 1) * w / grid).max(gj * w / grid + 1));
                    let cell = x.slice(s![bi, ci, h0..h1.min(h), w0..w1.min(w)]);
                    out[[bi, (ci * grid + gi) * grid + gj]] = cell.mean().unwrap_or(0.0);
                }
            }
        }
    }
    out
}

/// Maps samples to the rows of an `[N, out_dim]` matrix.
///
/// Identity expects `[N, out_dim]` input. The random convolutional embedding
/// expects `[N, C, H, W]` images with `H, W >= 4`.
pub fn embed(samples: &Tensor, spec: &EmbeddingSpec) -> Result<Array2<f64>> {
    if samples.ndim() == 0 || samples.shape()[0] == 0 {
        return Err(Error::Empty("no samples to embed".into()));
    }
    match spec.kind {
        EmbeddingKind::Identity => {
            if samples.ndim() != 2 || samples.shape()[1] != spec.out_dim {
                return Err(Error::shape(format!(
                    "identity embedding of dimension {} got samples {:?}",
                    spec.out_dim,
                    samples.shape()
                )));
            }
            Ok(samples.view().into_dimensionality().expect("2-D").to_owned())
        }
        EmbeddingKind::FixedRandomConv => {
            let sh = samples.shape();
            if sh.len() != 4 || sh[2] < 4 || sh[3] < 4 || spec.out_dim == 0 {
                return Err(Error::shape(format!("random conv embedding expects [N,C,H,W] images, got {sh:?}")));
            }
            let c = sh[1];
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let w1 = normal_tensor(&[EMBED_WIDTHS[0], c, 3, 3], (2.0 / (9 * c) as f64).sqrt(), &mut rng);
            let w2 = normal_tensor(
                &[EMBED_WIDTHS[1], EMBED_WIDTHS[0], 3, 3],
                (2.0 / (9 * EMBED_WIDTHS[0]) as f64).sqrt(),
                &mut rng,
            );
            let pooled = EMBED_WIDTHS[1] * EMBED_GRID * EMBED_GRID;
            let proj = normal_tensor(&[pooled, spec.out_dim], (1.0 / pooled as f64).sqrt(), &mut rng)
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-D");
            let mut out = Array2::zeros((sh[0], spec.out_dim));
            let mut start = 0;
            while start < sh[0] {
                let end = (start + EMBED_CHUNK).min(sh[0]);
                let tape = Tape::new();
                let x = tape.constant(samples.slice_axis(Axis(0), (start..end).into()).to_owned());
                let (a, b) = (tape.constant(w1.clone()), tape.constant(w2.clone()));
                let h = tape.conv2d(x, a, 2, 1)?;
                let h = tape.leaky_relu(h, 0.2);
                let h = tape.conv2d(h, b, 2, 1)?;
                let h = tape.leaky_relu(h, 0.2);
                let features = grid_pool(&tape.get(h), EMBED_GRID);
                out.slice_mut(s![start..end, ..]).assign(&features.dot(&proj));
                start = end;
            }
            Ok(out)
        }
    }
}

/// Population mean and covariance of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl GaussianSummary {
    pub fn new(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.dim() != (d, d) {
            return Err(Error::shape(format!("mean of length {d} with covariance {:?}", cov.dim())));
        }
        let cov = (&cov + &cov.t()) * 0.5;
        Ok(GaussianSummary { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn summarize(embedded: ArrayView2<'_, f64>) -> Result<GaussianSummary> {
    if embedded.nrows() < 2 {
        return Err(Error::Empty(format!("need at least 2 samples to summarize, got {}", embedded.nrows())));
    }
    let b = BatchStats::from_features(embedded)?;
    Ok(GaussianSummary {
        mean: b.mean().clone(),
        cov: b.cov().clone(),
    })
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

// tr((A B)^{1/2}) as tr((A^{1/2} B A^{1/2})^{1/2}), which is symmetric PSD.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sym_sqrt(a);
    let inner = &ra * b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`, clamped at zero.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.dim() != b.cov.dim() {
        return Err(Error::shape(format!("summaries of dimension {} and {}", a.dim(), b.dim())));
    }
    if a == b {
        return Ok(0.0);
    }
    let diff = &a.mean - &b.mean;
    let (sa, sb) = (to_na(&a.cov), to_na(&b.cov));
    let cross = 0.5 * (trace_sqrt_product(&sa, &sb) + trace_sqrt_product(&sb, &sa));
    let fd = diff.dot(&diff) + (a.cov.diag().sum() + b.cov.diag().sum()) - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::Numerical("non-finite Fréchet distance".into()));
    }
    Ok(fd.max(0.0))
}

fn check_pair(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Empty("MMD needs non-empty sample sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!("sample dimensions {} and {}", a.ncols(), b.ncols())));
    }
    Ok(())
}

fn mean_kernel(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, gamma: f64) -> f64 {
    let mut total = 0.0;
    for xi in x.outer_iter() {
        let mut row = 0.0;
        for yj in y.outer_iter() {
            let d2: f64 = xi.iter().zip(yj.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            row += (-gamma * d2).exp();
        }
        total += row;
    }
    total / (x.nrows() * y.nrows()) as f64
}

/// Biased (V-statistic) squared MMD with kernel `exp(-|x-y|^2 / (2 h^2))`.
pub fn mmd_rbf(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let gamma = 0.5 / (bandwidth * bandwidth);
    let cross = 0.5 * (mean_kernel(a, b, gamma) + mean_kernel(b, a, gamma));
    let v = mean_kernel(a, a, gamma) + mean_kernel(b, b, gamma) - 2.0 * cross;
    Ok(v.max(0.0))
}

/// Median pairwise distance over the pooled set; 1 if every point coincides.
pub fn median_bandwidth(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(a, b)?;
    let pooled: Vec<_> = a.outer_iter().chain(b.outer_iter()).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let d2: f64 = pooled[i].iter().zip(pooled[j].iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(if *m > 0.0 { *m } else { 1.0 })
}

/// Known mixture modes of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    centers: Array2<f64>,
    sigma: f64,
}

impl ModeSpec {
    pub fn new(centers: Array2<f64>, sigma: f64) -> Result<Self> {
        if centers.nrows() == 0 {
            return Err(Error::Empty("mode spec needs at least one center".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::config(format!("mode sigma must be positive, got {sigma}")));
        }
        for i in 0..centers.nrows() {
            for j in i + 1..centers.nrows() {
                if centers.row(i) == centers.row(j) {
                    return Err(Error::config(format!("mode centers {i} and {j} coincide")));
                }
            }
        }
        Ok(ModeSpec { centers, sigma })
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn num_modes(&self) -> usize {
        self.centers.nrows()
    }

    /// Minimum number of nearby samples for a mode to count as covered.
    pub fn coverage_threshold(&self, n: usize) -> f64 {
        (0.01 * n as f64).max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub covered_modes: usize,
    pub high_quality_fraction: f64,
    /// Samples within 3 sigma of each center (nearest center wins).
    pub counts: Vec<usize>,
}

pub fn mode_metrics(samples: ArrayView2<'_, f64>, spec: &ModeSpec) -> Result<ModeReport> {
    if samples.ncols() != spec.centers.ncols() {
        return Err(Error::shape(format!(
            "samples of dimension {} against centers of dimension {}",
            samples.ncols(),
            spec.centers.ncols()
        )));
    }
    if samples.nrows() == 0 {
        return Err(Error::Empty("no samples for mode metrics".into()));
    }
    let radius2 = (3.0 * spec.sigma).powi(2);
    let mut counts = vec![0usize; spec.num_modes()];
    let mut good = 0usize;
    for x in samples.outer_iter() {
        let nearest = spec
            .centers
            .outer_iter()
            .map(|c| x.iter().zip(c.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one center");
        if nearest.1 <= radius2 {
            counts[nearest.0] += 1;
            good += 1;
        }
    }
    let threshold = spec.coverage_threshold(samples.nrows());
    Ok(ModeReport {
        covered_modes: counts.iter().filter(|&&c| c as f64 >= threshold).count(),
        high_quality_fraction: good as f64 / samples.nrows() as f64,
        counts,
    })
}
