//! Implicit semantic augmentation losses.
//!
//! Features of a sample with pseudo label `y` are augmented as
//! `f* ~ N(f, lambda * Sigma_y)`. Averaging the cross-entropy over infinitely
//! many such draws has no closed form, but moving the expectation inside the
//! logarithm does: each class exponent gains `(lambda / 2) * dw^T Sigma dw`
//! with `dw = w_j - w_y`. [`asa_upper_bound`] evaluates that bound together
//! with its analytic gradients; [`sampled_asa_loss`] is the explicit
//! Monte-Carlo version it bounds.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{ClassStats, PSD_TOLERANCE};

/// Final linear layer of the discriminator: one weight row and bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weights: Array2<f64>,
    biases: Array1<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>) -> Result<Self> {
        let (classes, dim) = weights.dim();
        if classes < 2 {
            return Err(Error::config(format!("a classifier head needs at least 2 classes, got {classes}")));
        }
        if dim == 0 {
            return Err(Error::shape("classifier head has zero input dimension"));
        }
        if biases.len() != classes {
            return Err(Error::shape(format!(
                "{} biases for {classes} weight rows",
                biases.len()
            )));
        }
        Ok(ClassifierHead { weights, biases })
    }

    pub fn zeros(classes: usize, dim: usize) -> Result<Self> {
        Self::new(Array2::zeros((classes, dim)), Array1::zeros(classes))
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &Array1<f64> {
        &self.biases
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        features.dot(&self.weights.t()) + &self.biases
    }
}

/// Features with their pseudo labels (0 = fake, 1 = real).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("feature batch has no samples".into()));
        }
        if labels.len() != features.nrows() {
            return Err(Error::shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        Ok(FeatureBatch { features, labels })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Augmentation strength `lambda = base * step / total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationCoefficient {
    base: f64,
    step: u64,
    total: u64,
}

impl AugmentationCoefficient {
    pub fn new(base: f64, step: u64, total: u64) -> Result<Self> {
        lambda_schedule(step, total, base)?;
        Ok(AugmentationCoefficient { base, step, total })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn value(&self) -> f64 {
        self.base * self.step as f64 / self.total as f64
    }
}

/// Linear ramp of the augmentation strength over training.
pub fn lambda_schedule(step: u64, total: u64, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("total steps must be at least 1"));
    }
    if step > total {
        return Err(Error::config(format!("step {step} exceeds total steps {total}")));
    }
    if !(base >= 0.0) || !base.is_finite() {
        return Err(Error::config(format!("lambda base must be finite and nonnegative, got {base}")));
    }
    Ok(base * step as f64 / total as f64)
}

/// `(w_j - w_y)^T cov (w_j - w_y)`, clamped at zero.
pub fn quadratic_margin_term(
    w_j: ArrayView1<'_, f64>,
    w_y: ArrayView1<'_, f64>,
    cov: &Array2<f64>,
) -> Result<f64> {
    let d = w_j.len();
    if w_y.len() != d || cov.dim() != (d, d) {
        return Err(Error::shape(format!(
            "weight rows of length {} and {} with covariance {:?}",
            d,
            w_y.len(),
            cov.dim()
        )));
    }
    let dw = &w_j - &w_y;
    Ok(dw.dot(&cov.dot(&dw)).max(0.0))
}

/// Value and gradients of the augmented loss bound, averaged over the batch.
#[derive(Debug, Clone)]
pub struct AsaLoss {
    pub value: f64,
    pub grad_features: Array2<f64>,
    pub grad_weights: Array2<f64>,
    pub grad_biases: Array1<f64>,
}

fn check_inputs(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    head: &ClassifierHead,
    covs: &[&Array2<f64>],
    lambda: f64,
) -> Result<()> {
    let (b, d) = features.dim();
    if b == 0 {
        return Err(Error::Empty("loss needs at least one sample".into()));
    }
    if labels.len() != b || covs.len() != b {
        return Err(Error::shape(format!(
            "{b} feature rows, {} labels, {} covariances",
            labels.len(),
            covs.len()
        )));
    }
    if d != head.feature_dim() {
        return Err(Error::shape(format!(
            "feature dimension {d} does not match head input {}",
            head.feature_dim()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= head.num_classes()) {
        return Err(Error::config(format!("label {bad} out of range")));
    }
    if let Some(c) = covs.iter().find(|c| c.dim() != (d, d)) {
        return Err(Error::shape(format!("covariance {:?} for feature dimension {d}", c.dim())));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    Ok(())
}

/// Upper bound of the expected cross-entropy under feature augmentation,
/// with analytic gradients.
///
/// `covs[i]` is the covariance used to augment sample `i`. The covariances are
/// treated as constants; no gradient flows into them.
pub fn asa_upper_bound(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    head: &ClassifierHead,
    covs: &[&Array2<f64>],
    lambda: f64,
) -> Result<AsaLoss> {
    check_inputs(features, labels, head, covs, lambda)?;
    let (b, d) = features.dim();
    let c = head.num_classes();
    let w = &head.weights;
    let bias = &head.biases;

    let mut value = 0.0;
    let mut grad_features = Array2::<f64>::zeros((b, d));
    let mut grad_weights = Array2::<f64>::zeros((c, d));
    let mut grad_biases = Array1::<f64>::zeros(c);
    let mut exponents = vec![0.0; c];
    let mut sigma_dw: Vec<Option<Array1<f64>>> = vec![None; c];

    for (i, f) in features.outer_iter().enumerate() {
        let y = labels[i];
        let w_y = w.row(y);
        for j in 0..c {
            sigma_dw[j] = None;
            if j == y {
                exponents[j] = 0.0;
                continue;
            }
            let dw = &w.row(j) - &w_y;
            let mut a = dw.dot(&f) + (bias[j] - bias[y]);
            if lambda > 0.0 {
                let s = covs[i].dot(&dw);
                let q = dw.dot(&s);
                if q > 0.0 {
                    a += 0.5 * lambda * q;
                    sigma_dw[j] = Some(s);
                }
            }
            exponents[j] = a;
        }
        let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = exponents.iter().map(|&a| (a - max).exp()).sum();
        value += max + sum.ln();

        let mut gf = grad_features.row_mut(i);
        for j in 0..c {
            if j == y {
                continue;
            }
            let p = (exponents[j] - max).exp() / sum;
            let dw = &w.row(j) - &w_y;
            gf.scaled_add(p, &dw);
            let mut s = f.to_owned();
            if let Some(sd) = &sigma_dw[j] {
                s.scaled_add(lambda, sd);
            }
            grad_weights.row_mut(j).scaled_add(p, &s);
            grad_weights.row_mut(y).scaled_add(-p, &s);
            grad_biases[j] += p;
            grad_biases[y] -= p;
        }
    }

    let scale = 1.0 / b as f64;
    Ok(AsaLoss {
        value: value * scale,
        grad_features: grad_features * scale,
        grad_weights: grad_weights * scale,
        grad_biases: grad_biases * scale,
    })
}

/// Covariance of each sample's own class, taken from `stats` indexed by label.
pub fn covariances_by_label<'a>(labels: &[usize], stats: &[&'a ClassStats]) -> Result<Vec<&'a Array2<f64>>> {
    labels
        .iter()
        .map(|&y| {
            stats
                .get(y)
                .map(|s| s.cov())
                .ok_or_else(|| Error::config(format!("no statistics for class {y}")))
        })
        .collect()
}

/// Bound value for a labelled batch, each sample augmented with the
/// covariance of its own class (`stats[label]`).
pub fn asa_upper_bound_loss(
    batch: &FeatureBatch,
    head: &ClassifierHead,
    stats: &[&ClassStats],
    lambda: f64,
) -> Result<f64> {
    let covs = covariances_by_label(batch.labels(), stats)?;
    Ok(asa_upper_bound(batch.features().view(), batch.labels(), head, &covs, lambda)?.value)
}

/// Plain softmax cross-entropy from logits, averaged over the batch.
pub fn cross_entropy(batch: &FeatureBatch, head: &ClassifierHead) -> Result<f64> {
    if batch.dim() != head.feature_dim() {
        return Err(Error::shape("feature dimension does not match head"));
    }
    let logits = head.logits(batch.features().view());
    let mut total = 0.0;
    for (row, &y) in logits.outer_iter().zip(batch.labels()) {
        if y >= head.num_classes() {
            return Err(Error::config(format!("label {y} out of range")));
        }
        total += label_cross_entropy(row, y);
    }
    Ok(total / batch.len() as f64)
}

/// `-log softmax(z)[y]`, evaluated on the differences `z_j - z_y` so that
/// small losses keep their relative precision.
pub(crate) fn label_cross_entropy(z: ArrayView1<'_, f64>, y: usize) -> f64 {
    let margins: Vec<f64> = z.iter().map(|&v| v - z[y]).collect();
    margin_cross_entropy(&margins)
}

/// Cross-entropy of one feature vector in margin form, `log sum_j exp((w_j - w_y)^T f + b_j - b_y)`.
fn margin_cross_entropy(margins: &[f64]) -> f64 {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + margins.iter().map(|&a| (a - max).exp()).sum::<f64>().ln()
}

/// Draws `f* ~ N(f, lambda * cov)` through a fixed factor of `lambda * cov`.
#[derive(Debug, Clone)]
pub struct GaussianAugmenter {
    // Lower-triangular factor, or None when the draws are deterministic.
    factor: Option<Array2<f64>>,
    dim: usize,
}

impl GaussianAugmenter {
    pub fn new(cov: &Array2<f64>, lambda: f64) -> Result<Self> {
        let dim = cov.nrows();
        if cov.ncols() != dim {
            return Err(Error::shape(format!("covariance must be square, got {:?}", cov.dim())));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        if lambda == 0.0 || cov.iter().all(|&v| v == 0.0) {
            return Ok(GaussianAugmenter { factor: None, dim });
        }
        let sym = DMatrix::from_fn(dim, dim, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
        let mut jitter = PSD_TOLERANCE;
        while jitter <= 1e-6 * (1.0 + 1e-9) {
            let shifted = &sym + DMatrix::identity(dim, dim) * jitter;
            if let Some(chol) = shifted.cholesky() {
                let l = chol.l();
                let scale = lambda.sqrt();
                let factor = Array2::from_shape_fn((dim, dim), |(i, j)| l[(i, j)] * scale);
                return Ok(GaussianAugmenter {
                    factor: Some(factor),
                    dim,
                });
            }
            jitter *= 10.0;
        }
        Err(Error::Numerical(
            "covariance factorization failed even with 1e-6 jitter".into(),
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_deterministic(&self) -> bool {
        self.factor.is_none()
    }

    /// `count` draws around `center`, one per row.
    pub fn sample(&self, center: ArrayView1<'_, f64>, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut out = Array2::from_shape_fn((count, self.dim), |(_, j)| center[j]);
        if let Some(l) = &self.factor {
            let z = Array2::from_shape_simple_fn((count, self.dim), || StandardNormal.sample(rng));
            out += &z.dot(&l.t());
        }
        out
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Running mean and variance; repeated identical values leave the mean
/// exactly unchanged.
#[derive(Debug, Clone, Copy, Default)]
struct Running {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn estimate(&self) -> McEstimate {
        let stderr = if self.n > 1 {
            (self.m2 / (self.n - 1) as f64).max(0.0).sqrt() / (self.n as f64).sqrt()
        } else {
            0.0
        };
        McEstimate {
            mean: self.mean,
            stderr,
            samples: self.n,
        }
    }
}

const DRAW_CHUNK: usize = 4096;

/// Explicit augmented loss: the batch cross-entropy averaged over `draws`
/// augmented copies of every feature vector. The standard error is over the
/// per-draw batch means.
pub fn sampled_asa_loss(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    head: &ClassifierHead,
    covs: &[&Array2<f64>],
    lambda: f64,
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_inputs(features, labels, head, covs, lambda)?;
    if draws == 0 {
        return Err(Error::config("number of Monte-Carlo draws must be at least 1"));
    }
    let (b, _) = features.dim();
    let c = head.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let augmenters = covs
        .iter()
        .map(|cov| GaussianAugmenter::new(cov, lambda))
        .collect::<Result<Vec<_>>>()?;
    let mut running = Running::default();
    if augmenters.iter().all(GaussianAugmenter::is_deterministic) {
        // every draw is the unaugmented batch
        let value = asa_upper_bound(features, labels, head, covs, 0.0)?.value;
        (0..draws).for_each(|_| running.push(value));
        return Ok(running.estimate());
    }
    // (w_j - w_y) for every sample, stacked as D x C
    let diffs: Vec<Array2<f64>> = labels
        .iter()
        .map(|&y| {
            let w_y = head.weights.row(y);
            let mut m = head.weights.clone();
            for mut row in m.outer_iter_mut() {
                row -= &w_y;
            }
            m.reversed_axes()
        })
        .collect();

    let mut done = 0;
    let mut per_draw = vec![0.0; DRAW_CHUNK];
    let mut margins = vec![0.0; c];
    while done < draws {
        let chunk = DRAW_CHUNK.min(draws - done);
        per_draw[..chunk].iter_mut().for_each(|v| *v = 0.0);
        for i in 0..b {
            let y = labels[i];
            let drawn = augmenters[i].sample(features.row(i), chunk, &mut rng);
            let projected = drawn.dot(&diffs[i]);
            for (k, row) in projected.outer_iter().enumerate() {
                for j in 0..c {
                    margins[j] = if j == y {
                        0.0
                    } else {
                        row[j] + (head.biases[j] - head.biases[y])
                    };
                }
                per_draw[k] += margin_cross_entropy(&margins);
            }
        }
        for &v in &per_draw[..chunk] {
            running.push(v / b as f64);
        }
        done += chunk;
    }
    Ok(running.estimate())
}

/// Comparison of the closed-form bound against a Monte-Carlo estimate of the
/// expected augmented loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub bound: f64,
    pub samples: usize,
    pub holds: bool,
}

impl BoundReport {
    pub fn gap(&self) -> f64 {
        self.bound - self.mc_mean
    }

    fn judge(mc: McEstimate, bound: f64) -> Self {
        BoundReport {
            mc_mean: mc.mean,
            mc_stderr: mc.stderr,
            bound,
            samples: mc.samples,
            holds: bound >= mc.mean - 3.0 * mc.stderr,
        }
    }

    /// Recomputes `holds` after the bound has been overridden.
    pub fn with_bound(self, bound: f64) -> Self {
        Self::judge(
            McEstimate {
                mean: self.mc_mean,
                stderr: self.mc_stderr,
                samples: self.samples,
            },
            bound,
        )
    }
}

pub fn verify_jensen_bound(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    head: &ClassifierHead,
    covs: &[&Array2<f64>],
    lambda: f64,
    draws: usize,
    seed: u64,
) -> Result<BoundReport> {
    let bound = asa_upper_bound(features, labels, head, covs, lambda)?.value;
    let mc = sampled_asa_loss(features, labels, head, covs, lambda, draws, seed)?;
    Ok(BoundReport::judge(mc, bound))
}

/// A random two-class problem for checking the bound: one feature vector per
/// class, a random head, per-class covariances and a strength `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInstance {
    pub index: usize,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub head: ClassifierHead,
    pub covs: Vec<Array2<f64>>,
    pub lambda: f64,
}

const INSTANCE_DIMS: [usize; 3] = [4, 16, 64];

impl BoundInstance {
    /// Instance `index` of the grid drawn from `seed`. Dimensions cycle
    /// through 4, 16 and 64, `lambda` is uniform on (0, 2] and every tenth
    /// instance has zero covariance.
    pub fn generate(index: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let d = INSTANCE_DIMS[index % INSTANCE_DIMS.len()];
        let mut normal = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_simple_fn((rows, cols), || scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        };
        let features = normal(2, d, 1.0);
        let weights = normal(2, d, 1.0 / (d as f64).sqrt());
        let biases = normal(1, 2, 0.5).row(0).to_owned();
        let zero = index % 10 == 9;
        let covs = (0..2)
            .map(|_| {
                let a = normal(d, d, 1.0 / (d as f64).sqrt());
                if zero {
                    Array2::zeros((d, d))
                } else {
                    a.dot(&a.t())
                }
            })
            .collect();
        let lambda = 2.0 * (1.0 - rng.random::<f64>());
        BoundInstance {
            index,
            features,
            labels: vec![0, 1],
            head: ClassifierHead::new(weights, biases).expect("matching shapes"),
            covs,
            lambda,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn has_zero_covariance(&self) -> bool {
        self.covs.iter().all(|c| c.iter().all(|&v| v == 0.0))
    }

    pub fn cov_refs(&self) -> Vec<&Array2<f64>> {
        self.labels.iter().map(|&y| &self.covs[y]).collect()
    }

    pub fn verify(&self, draws: usize, seed: u64) -> Result<BoundReport> {
        verify_jensen_bound(self.features.view(), &self.labels, &self.head, &self.cov_refs(), self.lambda, draws, seed)
    }
}

/// Empirical against closed-form `E[exp(X)]` for `X ~ N(mu, var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MgfReport {
    pub mu: f64,
    pub var: f64,
    pub empirical: f64,
    pub analytic: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl MgfReport {
    pub fn holds(&self) -> bool {
        (self.empirical - self.analytic).abs() <= 3.0 * self.stderr
    }
}

pub fn mgf_check(mu: f64, var: f64, draws: usize, seed: u64) -> Result<MgfReport> {
    if !(var >= 0.0) {
        return Err(Error::config(format!("variance must be nonnegative, got {var}")));
    }
    if draws == 0 {
        return Err(Error::config("number of draws must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = var.sqrt();
    let mut running = Running::default();
    for _ in 0..draws {
        let z: f64 = StandardNormal.sample(&mut rng);
        running.push((mu + sd * z).exp());
    }
    let est = running.estimate();
    Ok(MgfReport {
        mu,
        var,
        empirical: est.mean,
        analytic: (mu + 0.5 * var).exp(),
        stderr: est.stderr,
        samples: draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn identity(d: usize) -> Array2<f64> {
        Array2::eye(d)
    }

    #[test]
    fn quadratic_term_examples() {
        let q = quadratic_margin_term(array![1.0, 1.0].view(), array![0.0, 0.0].view(), &identity(2)).unwrap();
        assert_eq!(q, 2.0);
        let q = quadratic_margin_term(array![3.0, -1.0].view(), array![0.5, 2.0].view(), &Array2::zeros((2, 2)))
            .unwrap();
        assert_eq!(q, 0.0);
        let cov = array![[2.0, 1.0], [1.0, 2.0]];
        let q = quadratic_margin_term(array![1.0, 0.0].view(), array![0.0, 0.0].view(), &cov).unwrap();
        assert_eq!(q, 2.0);
        assert!(quadratic_margin_term(array![1.0].view(), array![0.0, 0.0].view(), &cov).is_err());
    }

    #[test]
    fn quadratic_term_clamps_negative_noise() {
        let cov = array![[-1e-12, 0.0], [0.0, 0.0]];
        let q = quadratic_margin_term(array![1.0, 0.0].view(), array![0.0, 0.0].view(), &cov).unwrap();
        assert_eq!(q, 0.0);
    }

    #[test]
    fn zero_head_gives_log_two() {
        let head = ClassifierHead::zeros(2, 3).unwrap();
        let f = array![[1.0, -2.0, 0.5], [3.0, 0.0, 1.0]];
        let cov = Array2::from_elem((3, 3), 0.3) + identity(3);
        let loss = asa_upper_bound(f.view(), &[0, 1], &head, &[&cov, &cov], 1.7).unwrap();
        assert!((loss.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lambda_schedule_examples() {
        assert_eq!(lambda_schedule(0, 1000, 1.0).unwrap(), 0.0);
        assert_eq!(lambda_schedule(1000, 1000, 1.0).unwrap(), 1.0);
        assert_eq!(lambda_schedule(500, 1000, 2.0).unwrap(), 1.0);
        assert!(lambda_schedule(1001, 1000, 1.0).is_err());
        assert!(lambda_schedule(0, 0, 1.0).is_err());
        assert!(lambda_schedule(0, 10, -1.0).is_err());
        let coef = AugmentationCoefficient::new(2.0, 3, 4).unwrap();
        assert_eq!(coef.value(), 1.5);
    }

    #[test]
    fn negative_lambda_and_bad_shapes_rejected() {
        let head = ClassifierHead::zeros(2, 2).unwrap();
        let f = array![[1.0, 2.0]];
        let cov = identity(2);
        assert!(asa_upper_bound(f.view(), &[1], &head, &[&cov], -0.1).is_err());
        assert!(asa_upper_bound(f.view(), &[2], &head, &[&cov], 0.1).is_err());
        let wrong = identity(3);
        assert!(asa_upper_bound(f.view(), &[1], &head, &[&wrong], 0.1).is_err());
        assert!(ClassifierHead::new(Array2::zeros((1, 2)), Array1::zeros(1)).is_err());
    }

    #[test]
    fn binary_form_is_softplus_of_augmented_margin() {
        let head = ClassifierHead::new(array![[0.2, -0.4], [1.0, 0.3]], array![0.1, -0.2]).unwrap();
        let cov = array![[0.5, 0.1], [0.1, 0.3]];
        let f = array![[0.7, -1.1]];
        let lam = 0.8;
        let got = asa_upper_bound(f.view(), &[1], &head, &[&cov], lam).unwrap().value;
        let dw = array![0.2 - 1.0, -0.4 - 0.3];
        let margin = dw.dot(&f.row(0)) + (0.1 - -0.2) + 0.5 * lam * dw.dot(&cov.dot(&dw));
        let expect = (1.0 + f64::exp(margin)).ln();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn sampled_loss_without_augmentation_is_plain_cross_entropy() {
        let head = ClassifierHead::new(array![[0.2, -0.4], [1.0, 0.3]], array![0.1, -0.2]).unwrap();
        let f = array![[0.7, -1.1], [0.1, 0.9]];
        let batch = FeatureBatch::new(f.clone(), vec![1, 0]).unwrap();
        let ce = cross_entropy(&batch, &head).unwrap();
        let cov = array![[0.5, 0.1], [0.1, 0.3]];
        let zero = Array2::zeros((2, 2));
        let a = sampled_asa_loss(f.view(), &[1, 0], &head, &[&cov, &cov], 0.0, 17, 3).unwrap();
        let b = sampled_asa_loss(f.view(), &[1, 0], &head, &[&zero, &zero], 1.3, 5, 3).unwrap();
        assert!((a.mean - ce).abs() < 1e-14);
        assert!((b.mean - ce).abs() < 1e-14);
        assert_eq!(a.stderr, 0.0);
    }

    #[test]
    fn sampled_loss_is_seed_deterministic() {
        let head = ClassifierHead::new(array![[0.2, -0.4], [1.0, 0.3]], array![0.1, -0.2]).unwrap();
        let f = array![[0.7, -1.1]];
        let cov = array![[0.5, 0.1], [0.1, 0.3]];
        let a = sampled_asa_loss(f.view(), &[1], &head, &[&cov], 0.9, 5000, 11).unwrap();
        let b = sampled_asa_loss(f.view(), &[1], &head, &[&cov], 0.9, 5000, 11).unwrap();
        assert_eq!(a, b);
        assert!(sampled_asa_loss(f.view(), &[1], &head, &[&cov], 0.9, 0, 11).is_err());
    }

    #[test]
    fn zero_covariance_gap_is_exactly_zero() {
        let head = ClassifierHead::new(array![[0.2, -0.4, 0.1], [1.0, 0.3, -0.5]], array![0.1, -0.2]).unwrap();
        let f = array![[0.7, -1.1, 0.4], [0.3, 0.3, -2.0], [1.5, 0.0, 0.2]];
        let zero = Array2::zeros((3, 3));
        let r = verify_jensen_bound(f.view(), &[1, 0, 1], &head, &[&zero, &zero, &zero], 1.2, 1000, 5).unwrap();
        assert_eq!(r.bound, r.mc_mean);
        assert_eq!(r.gap(), 0.0);
        assert!(r.holds);
    }

    #[test]
    fn mgf_closed_form_and_degenerate_draw() {
        let r = mgf_check(0.0, 1.0, 10, 1).unwrap();
        assert!((r.analytic - 1.648_721_270_700_128).abs() < 1e-15);
        let r = mgf_check(1.0, 0.0, 1000, 1).unwrap();
        assert_eq!(r.empirical, std::f64::consts::E);
        assert_eq!(r.analytic, std::f64::consts::E);
        assert!(mgf_check(0.0, -1.0, 10, 1).is_err());
    }

    #[test]
    fn augmenter_is_deterministic_without_spread() {
        let cov = array![[1.0, 0.2], [0.2, 2.0]];
        assert!(GaussianAugmenter::new(&cov, 0.0).unwrap().is_deterministic());
        assert!(GaussianAugmenter::new(&Array2::zeros((2, 2)), 1.0).unwrap().is_deterministic());
        let aug = GaussianAugmenter::new(&cov, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = aug.sample(array![1.0, 2.0].view(), 3, &mut rng);
        assert_eq!(d.dim(), (3, 2));
    }

    #[test]
    fn indefinite_covariance_fails_factorization() {
        let cov = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(matches!(GaussianAugmenter::new(&cov, 1.0), Err(Error::Numerical(_))));
    }
}
