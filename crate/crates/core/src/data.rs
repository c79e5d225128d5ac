//! Training sets: synthetic Gaussian mixtures with known modes, few-shot
//! image folders, deterministic N-shot subsets and latent codes.
//!
//! The mixture parameters (ring radius 2 with sigma 0.02, grid spacing 2 with
//! sigma 0.05) are conventions of this crate, picked so a small MLP GAN
//! converges within 20k steps on a CPU. Points are divided by a fixed scale so
//! every sample lies in `[-1, 1]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::metrics::ModeSpec;
use crate::nets::LatentBatch;

const RING_MODES: usize = 8;
const RING_RADIUS: f64 = 2.0;
const RING_SIGMA: f64 = 0.02;
const RING_SCALE: f64 = 2.5;
const GRID_SIDE: usize = 5;
const GRID_SPACING: f64 = 2.0;
const GRID_SIGMA: f64 = 0.05;
const GRID_SCALE: f64 = 4.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Ring8,
    Grid25,
    ImageFolder,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring8" => Ok(DatasetKind::Ring8),
            "grid25" => Ok(DatasetKind::Grid25),
            "image_folder" => Ok(DatasetKind::ImageFolder),
            other => Err(Error::config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// An immutable stack of equally shaped samples, `[N, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    samples: Tensor,
    mode_spec: Option<ModeSpec>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, samples: Tensor, mode_spec: Option<ModeSpec>) -> Result<Self> {
        if samples.ndim() < 2 || samples.shape()[0] == 0 {
            return Err(Error::Empty(format!("dataset of shape {:?}", samples.shape())));
        }
        if samples.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::config("dataset values must lie in [-1, 1]"));
        }
        Ok(Dataset {
            kind,
            samples,
            mode_spec,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn mode_spec(&self) -> Option<&ModeSpec> {
        self.mode_spec.as_ref()
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// `(channels, resolution)` for image stacks.
    pub fn image_geometry(&self) -> Option<(usize, usize)> {
        match *self.samples.shape() {
            [_, c, h, w] if h == w => Some((c, h)),
            _ => None,
        }
    }

    /// Vector samples as an `[N, d]` matrix.
    pub fn as_matrix(&self) -> Option<ArrayView2<'_, f64>> {
        self.samples.view().into_dimensionality::<Ix2>().ok()
    }

    pub fn select(&self, indices: &[usize]) -> Tensor {
        self.samples.select(Axis(0), indices)
    }
}

fn ring_center(i: usize) -> [f64; 2] {
    let a = 2.0 * std::f64::consts::PI * i as f64 / RING_MODES as f64;
    [RING_RADIUS * a.cos() / RING_SCALE, RING_RADIUS * a.sin() / RING_SCALE]
}

fn grid_center(i: usize) -> [f64; 2] {
    let half = (GRID_SIDE / 2) as f64;
    let (r, c) = (i / GRID_SIDE, i % GRID_SIDE);
    [
        (r as f64 - half) * GRID_SPACING / GRID_SCALE,
        (c as f64 - half) * GRID_SPACING / GRID_SCALE,
    ]
}

/// Gaussian mixture with known centers, deterministic per seed.
pub fn synth_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("synthetic dataset needs n >= 1".into()));
    }
    let (modes, center, sigma, scale): (usize, fn(usize) -> [f64; 2], f64, f64) = match kind {
        DatasetKind::Ring8 => (RING_MODES, ring_center, RING_SIGMA, RING_SCALE),
        DatasetKind::Grid25 => (GRID_SIDE * GRID_SIDE, grid_center, GRID_SIGMA, GRID_SCALE),
        DatasetKind::ImageFolder => {
            return Err(Error::config("image_folder is not a synthetic dataset kind"));
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((n, 2));
    for mut row in samples.outer_iter_mut() {
        let c = center(rng.random_range(0..modes));
        for (k, v) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = (c[k] + noise * sigma / scale).clamp(-1.0, 1.0);
        }
    }
    let centers = Array2::from_shape_fn((modes, 2), |(i, k)| center(i)[k]);
    let spec = ModeSpec::new(centers, sigma / scale)?;
    Dataset::new(kind, samples.into_dyn(), Some(spec))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes every file in `dir` (lexicographic order), resizes bilinearly to
/// `resolution x resolution` and maps pixels to `[-1, 1]`.
pub fn load_image_folder(dir: &Path, resolution: usize, channels: usize) -> Result<Dataset> {
    if resolution == 0 {
        return Err(Error::config("resolution must be positive"));
    }
    if !matches!(channels, 1 | 3) {
        return Err(Error::config(format!("channels must be 1 or 3, got {channels}")));
    }
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(Error::Empty(format!("no image files in {}", dir.display())));
    }
    let r = resolution as u32;
    let mut samples = ArrayD::zeros(IxDyn(&[files.len(), channels, resolution, resolution]));
    for (i, path) in files.iter().enumerate() {
        let img = image::open(path).map_err(|e| Error::Data {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let img = img.resize_exact(r, r, FilterType::Triangle);
        let pixels: Vec<u8> = if channels == 1 {
            img.to_luma8().into_raw()
        } else {
            img.to_rgb8().into_raw()
        };
        for (k, &p) in pixels.iter().enumerate() {
            let (y, x, c) = (k / (resolution * channels), (k / channels) % resolution, k % channels);
            samples[[i, c, y, x]] = p as f64 / 127.5 - 1.0;
        }
    }
    Dataset::new(DatasetKind::ImageFolder, samples, None)
}

/// Uniform subsample of `n` rows without replacement; original order is kept.
pub fn nshot_subset(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > data.len() {
        return Err(Error::config(format!("cannot take {n} samples from a dataset of {}", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, data.len(), n).into_vec();
    idx.sort_unstable();
    Dataset::new(data.kind, data.select(&idx), data.mode_spec.clone())
}

/// `[batch, dim]` standard normal draws from `rng`.
pub fn sample_latent<R: Rng>(rng: &mut R, batch: usize, dim: usize) -> Result<LatentBatch> {
    if batch == 0 || dim == 0 {
        return Err(Error::config(format!("latent batch {batch}x{dim} must be non-empty")));
    }
    LatentBatch::new(Array2::from_shape_simple_fn((batch, dim), || StandardNormal.sample(rng)))
}

/// A seeded stream of latent batches.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    seed: u64,
    rng: ChaCha8Rng,
}

impl LatentSampler {
    pub fn new(seed: u64) -> Self {
        LatentSampler {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, batch: usize, dim: usize) -> Result<LatentBatch> {
        sample_latent(&mut self.rng, batch, dim)
    }

    pub fn reset(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }
}

/// One comma-separated row per sample.
pub fn write_delimited<W: Write>(rows: ArrayView2<'_, f64>, mut out: W) -> std::io::Result<()> {
    for row in rows.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Writes `n` PNG images of soft colored disks on shaded backgrounds, a
/// stand-in few-shot corpus. Deterministic per seed.
pub fn write_shapes_folder(dir: &Path, n: usize, resolution: u32, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = resolution as f64;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let bg: [f64; 3] = [rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.2..0.5)];
        let fg: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.3..1.0), rng.random_range(0.0..0.6)];
        let (cx, cy) = (rng.random_range(0.3..0.7) * res, rng.random_range(0.3..0.7) * res);
        let radius = rng.random_range(0.15..0.3) * res;
        let img = image::RgbImage::from_fn(resolution, resolution, |x, y| {
            let shade = 0.7 + 0.3 * y as f64 / res;
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let t = (radius + 0.5 - d).clamp(0.0, 1.0);
            let px = |c: usize| ((bg[c] * shade * (1.0 - t) + fg[c] * t) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        let path = dir.join(format!("img_{i:04}.png"));
        img.save(&path).map_err(|e| Error::Data {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        paths.push(path);
    }
    Ok(paths)
}
