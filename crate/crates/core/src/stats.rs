//! Streaming per-class feature statistics.
//!
//! Each class (real or fake) keeps a running mean and population covariance
//! of discriminator features over the whole run. Mini-batch moments are folded
//! in with the pairwise merge rule, so the running state equals the moments of
//! the concatenated stream regardless of how it was split into batches.

use std::cmp::Ordering;
use std::fmt;
use std::sync::{Arc, RwLock};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance below zero accepted for the smallest covariance eigenvalue.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Pseudo label of a sample: generated images are class 0, real images class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Fake = 0,
    Real = 1,
}

impl ClassId {
    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Result<Self> {
        match label {
            0 => Ok(ClassId::Fake),
            1 => Ok(ClassId::Real),
            other => Err(Error::config(format!("pseudo label must be 0 or 1, got {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Fake => "fake",
            ClassId::Real => "real",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Moments of a single mini-batch. The covariance uses the population
/// convention (divide by the batch size), which is the one that composes
/// exactly under merging.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    mean: Array1<f64>,
    cov: Array2<f64>,
    size: usize,
}

impl BatchStats {
    /// Moments of the rows of `features` (one sample per row).
    ///
    /// Rows are accumulated in a canonical (lexicographically sorted) order,
    /// so any permutation of the batch produces bit-identical results.
    pub fn from_features<T>(features: ArrayView2<'_, T>) -> Result<Self>
    where
        T: Copy + Into<f64>,
    {
        let (m, dim) = features.dim();
        if m == 0 {
            return Err(Error::Empty("batch_stats needs at least one sample".into()));
        }
        if dim == 0 {
            return Err(Error::shape("features have zero columns"));
        }
        let mut rows: Vec<Vec<f64>> = features
            .outer_iter()
            .map(|r| r.iter().map(|&v| v.into()).collect())
            .collect();
        rows.sort_by(|a, b| cmp_rows(a, b));

        // Shifting by the first row keeps duplicated samples exactly zero-variance.
        let shift = rows[0].clone();
        let mut offset = Array1::<f64>::zeros(dim);
        for row in &rows {
            for ((acc, &v), &s) in offset.iter_mut().zip(row).zip(&shift) {
                *acc += v - s;
            }
        }
        offset /= m as f64;
        let mean = Array1::from_iter(shift.iter().zip(offset.iter()).map(|(&s, &o)| s + o));

        let mut cov = Array2::<f64>::zeros((dim, dim));
        let mut centered = vec![0.0; dim];
        for row in &rows {
            for ((c, &v), &mu) in centered.iter_mut().zip(row).zip(mean.iter()) {
                *c = v - mu;
            }
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    cov[[i, j]] += ci * centered[j];
                }
            }
        }
        cov /= m as f64;
        mirror_upper(&mut cov);
        Ok(BatchStats { mean, cov, size: m })
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

fn mirror_upper(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            m[[i, j]] = m[[j, i]];
        }
    }
}

/// Running mean, covariance and sample count of one class of features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    class: ClassId,
    mean: Array1<f64>,
    cov: Array2<f64>,
    count: u64,
    // Effective number of samples behind the current moments. Equals `count`
    // unless a decay factor below one has been used.
    weight: f64,
}

impl ClassStats {
    pub fn new(dim: usize, class: ClassId) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("statistics dimension must be positive"));
        }
        Ok(ClassStats {
            class,
            mean: Array1::zeros(dim),
            cov: Array2::zeros((dim, dim)),
            count: 0,
            weight: 0.0,
        })
    }

    /// Rebuilds a state from stored moments, e.g. when loading a checkpoint.
    pub fn from_parts(
        class: ClassId,
        mean: Array1<f64>,
        cov: Array2<f64>,
        count: u64,
        weight: f64,
    ) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 || cov.dim() != (dim, dim) {
            return Err(Error::shape(format!(
                "mean of length {dim} does not match covariance {:?}",
                cov.dim()
            )));
        }
        if !(weight >= 0.0) || (count == 0 && weight != 0.0) {
            return Err(Error::config(format!("invalid effective weight {weight} for count {count}")));
        }
        Ok(ClassStats {
            class,
            mean,
            cov,
            count,
            weight,
        })
    }

    pub fn class(&self) -> ClassId {
        self.class
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Read-only view of the current moments.
    pub fn view(&self) -> StatsView<'_> {
        StatsView {
            mean: &self.mean,
            cov: &self.cov,
            count: self.count,
        }
    }

    /// Folds one batch into the running moments (whole-history aggregation).
    pub fn update(&mut self, batch: &BatchStats) -> Result<()> {
        self.update_with_decay(batch, 1.0)
    }

    /// Like [`update`](Self::update), but first scales the weight of the
    /// history by `decay` in (0, 1]. `decay == 1` is plain aggregation.
    pub fn update_with_decay(&mut self, batch: &BatchStats, decay: f64) -> Result<()> {
        if batch.dim() != self.dim() {
            return Err(Error::shape(format!(
                "batch dimension {} does not match statistics dimension {}",
                batch.dim(),
                self.dim()
            )));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config(format!("stats decay must lie in (0, 1], got {decay}")));
        }
        let n_old = if decay == 1.0 { self.weight } else { self.weight * decay };
        let m = batch.size as f64;
        let n = n_old + m;
        let w_old = n_old / n;
        let w_new = m / n;
        let cross = n_old * m / (n * n);

        let delta = &batch.mean - &self.mean;
        self.mean.scaled_add(w_new, &delta);

        let dim = self.dim();
        for i in 0..dim {
            for j in i..dim {
                let v = w_old * self.cov[[i, j]] + w_new * batch.cov[[i, j]] + cross * delta[i] * delta[j];
                self.cov[[i, j]] = v;
            }
        }
        mirror_upper(&mut self.cov);

        self.count += batch.size as u64;
        self.weight = n;
        Ok(())
    }
}

/// Borrowed snapshot of a [`ClassStats`].
#[derive(Debug, Clone, Copy)]
pub struct StatsView<'a> {
    pub mean: &'a Array1<f64>,
    pub cov: &'a Array2<f64>,
    pub count: u64,
}

impl StatsView<'_> {
    /// With no samples yet the covariance is the zero matrix and augmentation
    /// is a no-op.
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Single-writer, many-reader wrapper for sharing statistics across threads.
#[derive(Debug, Clone)]
pub struct SharedClassStats {
    inner: Arc<RwLock<ClassStats>>,
}

impl SharedClassStats {
    pub fn new(stats: ClassStats) -> Self {
        SharedClassStats {
            inner: Arc::new(RwLock::new(stats)),
        }
    }

    pub fn update(&self, batch: &BatchStats) -> Result<()> {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        guard.update(batch)
    }

    /// Owned copy of the state; never observes a half-applied update.
    pub fn snapshot(&self) -> ClassStats {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Two-pass mean and population covariance of a whole stream at once.
/// Used as the reference the streaming updates are checked against.
pub fn oracle_stats(all_features: ArrayView2<'_, f64>, class: ClassId) -> Result<ClassStats> {
    let (n, dim) = all_features.dim();
    if n == 0 {
        return Err(Error::Empty("oracle_stats needs at least one sample".into()));
    }
    if dim == 0 {
        return Err(Error::shape("features have zero columns"));
    }
    let shift = all_features.row(0);
    let mean = &shift + &((&all_features - &shift).sum_axis(Axis(0)) / n as f64);
    let mut cov = Array2::<f64>::zeros((dim, dim));
    for row in all_features.outer_iter() {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..dim {
                cov[[i, j]] += di * (row[j] - mean[j]);
            }
        }
    }
    cov /= n as f64;
    // The two triangle sums are the same products in the same order.
    debug_assert!(cov.iter().zip(cov.t().iter()).all(|(a, b)| a == b));
    Ok(ClassStats {
        class,
        mean,
        cov,
        count: n as u64,
        weight: n as f64,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(sym: &Array2<f64>) -> f64 {
    let n = sym.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| sym[[i, j]]);
    m.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
