#![allow(dead_code)]

use asagan::autograd::{Tape, Tensor};
use asagan::data::sample_latent;
use asagan::nets::{Discriminator, Generator, LatentBatch, ModelConfig, ParamStore};
use asagan::loss::{asa_upper_bound_loss, ClassifierHead, FeatureBatch};
use asagan::stats::{ClassId, ClassStats};
use asagan::trainer::{discriminator_loss, generator_loss, GenLossMode, Objective};
use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn small_vector() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        feature_dim: 8,
        hidden_width: 16,
        ..ModelConfig::vector(2)
    }
}

pub fn small_image() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        feature_dim: 8,
        ..ModelConfig::image(1, 8)
    }
}

pub fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = Array2::from_shape_simple_fn((d, d), || rng.random_range(-1.0..1.0));
    a.dot(&a.t()) / d as f64
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-0.9..0.9))
}

/// O(1) weights so that gradients dominate finite-difference roundoff.
pub fn randomize(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for v in params.values_mut() {
        let fan_in = if v.ndim() > 1 { v.len() / v.shape()[v.ndim() - 1] } else { 1 };
        let scale = 1.5 / (fan_in as f64).sqrt().max(1.0);
        v.mapv_inplace(|_| rng.random_range(-scale..scale));
    }
}

pub struct Setup {
    pub disc: Discriminator,
    pub gen: Generator,
    pub x_real: Tensor,
    pub fakes: Tensor,
    pub z: LatentBatch,
    pub cov_real: Array2<f64>,
    pub cov_fake: Array2<f64>,
}

pub fn setup(model: &ModelConfig, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 5;
    let mut disc = Discriminator::new(model, seed).unwrap();
    let mut gen = Generator::new(model, seed + 1).unwrap();
    randomize(disc.params_mut(), &mut rng);
    randomize(gen.params_mut(), &mut rng);
    let mut shape = vec![b];
    shape.extend(model.sample_shape());
    let x_real = uniform(&shape, &mut rng);
    let z = sample_latent(&mut rng, b, model.latent_dim).unwrap();
    let fakes = gen.generate(&z).unwrap();
    Setup {
        disc,
        gen,
        x_real,
        fakes,
        z,
        cov_real: random_psd(model.feature_dim, &mut rng),
        cov_fake: random_psd(model.feature_dim, &mut rng),
    }
}

pub fn d_loss(s: &Setup, disc: &Discriminator, lambda: f64, objective: Objective, grads: bool) -> (f64, Vec<Option<Tensor>>) {
    let tape = Tape::new();
    let p = disc.params().bind(&tape, true);
    let x = tape.constant(concatenate(Axis(0), &[s.x_real.view(), s.fakes.view()]).unwrap());
    let out = disc.forward(&tape, &p, x).unwrap();
    let spec = disc.config().recon_spec(1.0);
    let (loss, _) = discriminator_loss(&tape, disc, &p, &out, &s.x_real, &s.cov_real, &s.cov_fake, lambda, objective, &spec)
        .unwrap();
    let value = tape.scalar(loss);
    if !grads {
        return (value, Vec::new());
    }
    let mut g = tape.backward(loss);
    (value, p.iter().map(|&v| g.take(v)).collect())
}

pub fn g_loss(
    s: &Setup,
    gen: &Generator,
    lambda: f64,
    mode: GenLossMode,
    objective: Objective,
    grads: bool,
) -> (f64, Vec<Option<Tensor>>) {
    let tape = Tape::new();
    let pg = gen.params().bind(&tape, true);
    let pd = s.disc.params().bind(&tape, false);
    let loss = generator_loss(&tape, gen, &pg, &s.disc, &pd, &s.z, &s.cov_fake, lambda, mode, objective).unwrap();
    let value = tape.scalar(loss);
    if !grads {
        return (value, Vec::new());
    }
    let mut g = tape.backward(loss);
    (value, pg.iter().map(|&v| g.take(v)).collect())
}

/// Normwise relative error of the analytic gradient against central
/// differences, per parameter tensor. `stride` subsamples coordinates.
pub fn check<M: Clone>(
    model: &M,
    params: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    analytic: &[Option<Tensor>],
    stride: usize,
) -> Vec<(String, f64)> {
    let mut probe = model.clone();
    let n = params(&mut probe).len();
    let mut out = Vec::new();
    for k in 0..n {
        let len = params(&mut probe).values()[k].len();
        let zero = ArrayD::zeros(params(&mut probe).values()[k].raw_dim());
        let a = analytic[k].as_ref().unwrap_or(&zero);
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for i in (0..len).step_by(stride) {
            let orig = params(&mut probe).values()[k].as_slice().unwrap()[i];
            params(&mut probe).values_mut()[k].as_slice_mut().unwrap()[i] = orig + H;
            let up = loss(&probe);
            params(&mut probe).values_mut()[k].as_slice_mut().unwrap()[i] = orig - H;
            let down = loss(&probe);
            params(&mut probe).values_mut()[k].as_slice_mut().unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * H);
            let an = a.as_slice().unwrap()[i];
            diff2 += (an - fd).powi(2);
            norm2 += fd.powi(2);
        }
        let name = params(&mut probe).iter().nth(k).map(|(n, _)| n.to_string()).unwrap();
        out.push((name, diff2.sqrt() / norm2.sqrt().max(1e-12)));
    }
    out
}

/// Random two-class bound instance with PSD class covariances.
pub struct Instance {
    pub batch: FeatureBatch,
    pub head: ClassifierHead,
    pub fake: ClassStats,
    pub real: ClassStats,
}

impl Instance {
    pub fn random(seed: u64, d: usize, b: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |r: usize, c: usize, s: f64| Array2::from_shape_simple_fn((r, c), || s * rng.random_range(-1.0..1.0));
        let features = u(b, d, 2.0);
        let weights = u(2, d, 1.0);
        let biases = u(1, 2, 0.5).row(0).to_owned();
        let a = u(d, d, 1.0 / (d as f64).sqrt());
        let c = u(d, d, 1.0 / (d as f64).sqrt());
        let labels = (0..b).map(|i| i % 2).collect();
        let stats = |class, m: Array2<f64>| {
            ClassStats::from_parts(class, Array1::zeros(d), m.dot(&m.t()), 10, 10.0).unwrap()
        };
        Instance {
            batch: FeatureBatch::new(features, labels).unwrap(),
            head: ClassifierHead::new(weights, biases).unwrap(),
            fake: stats(ClassId::Fake, a),
            real: stats(ClassId::Real, c),
        }
    }

    pub fn bound(&self, lambda: f64) -> f64 {
        asa_upper_bound_loss(&self.batch, &self.head, &[&self.fake, &self.real], lambda).unwrap()
    }

    pub fn covs(&self) -> Vec<&Array2<f64>> {
        self.batch.labels().iter().map(|&y| if y == 0 { self.fake.cov() } else { self.real.cov() }).collect()
    }
}
