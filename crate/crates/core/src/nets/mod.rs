//! Desk-scale generator and discriminator families.
//!
//! The vector family works on low-dimensional points with MLPs. The image
//! family uses small strided convolutions with channel/spatial attention after
//! every extractor stage of the discriminator. Each discriminator also carries
//! the two-class head consumed by the augmented loss and a small decoder used
//! for the reconstruction term.

mod attention;
mod layers;
mod params;

pub use attention::AttentionParams;
pub use layers::{Conv, Linear};
pub use params::{ParamId, ParamStore};

use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::loss::ClassifierHead;
use layers::LEAKY_SLOPE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Vector,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    /// Sample dimension (vector family).
    pub data_dim: usize,
    /// Image channels and side length (image family).
    pub channels: usize,
    pub resolution: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub base_channels: usize,
    pub attn_reduction: usize,
    pub attn_kernel: usize,
}

impl ModelConfig {
    pub fn vector(data_dim: usize) -> Self {
        ModelConfig {
            family: Family::Vector,
            data_dim,
            channels: 0,
            resolution: 0,
            latent_dim: 64,
            feature_dim: 64,
            hidden_width: 128,
            base_channels: 0,
            attn_reduction: 8,
            attn_kernel: 7,
        }
    }

    pub fn image(channels: usize, resolution: usize) -> Self {
        ModelConfig {
            family: Family::Image,
            data_dim: 0,
            channels,
            resolution,
            latent_dim: 64,
            feature_dim: 128,
            hidden_width: 0,
            base_channels: 8,
            attn_reduction: 8,
            attn_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.feature_dim == 0 {
            return Err(Error::config("latent and feature dimensions must be positive"));
        }
        match self.family {
            Family::Vector => {
                if self.data_dim == 0 || self.hidden_width == 0 {
                    return Err(Error::config("vector family needs positive data_dim and hidden_width"));
                }
            }
            Family::Image => {
                if !matches!(self.channels, 1 | 3) {
                    return Err(Error::config(format!("image channels must be 1 or 3, got {}", self.channels)));
                }
                if self.resolution < 8 || self.resolution % 8 != 0 {
                    return Err(Error::config(format!(
                        "image resolution must be a positive multiple of 8, got {}",
                        self.resolution
                    )));
                }
                if self.base_channels == 0 {
                    return Err(Error::config("base_channels must be positive"));
                }
                if self.attn_reduction == 0 || self.base_channels % self.attn_reduction != 0 {
                    return Err(Error::config(format!(
                        "attention reduction {} must divide base channels {}",
                        self.attn_reduction, self.base_channels
                    )));
                }
                if self.attn_kernel % 2 == 0 {
                    return Err(Error::config("attention kernel must be odd"));
                }
            }
        }
        Ok(())
    }

    /// Shape of one sample, without the batch axis.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.family {
            Family::Vector => vec![self.data_dim],
            Family::Image => vec![self.channels, self.resolution, self.resolution],
        }
    }

    pub fn recon_spec(&self, weight: f64) -> ReconSpec {
        ReconSpec {
            target_transform: match self.family {
                Family::Vector => TargetTransform::Identity,
                Family::Image => TargetTransform::Downsample2x,
            },
            weight,
        }
    }
}

fn batch_shape(batch: usize, sample: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(sample);
    s
}

fn check_batch(tape: &Tape, x: Var, sample: &[usize]) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() != sample.len() + 1 || shape[1..] != *sample || shape[0] == 0 {
        return Err(Error::shape(format!("expected a batch of {sample:?} samples, got {shape:?}")));
    }
    Ok(shape[0])
}

/// Latent codes, one per row, drawn from the standard normal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    codes: Array2<f64>,
}

impl LatentBatch {
    pub fn new(codes: Array2<f64>) -> Result<Self> {
        if codes.nrows() == 0 || codes.ncols() == 0 {
            return Err(Error::Empty("latent batch must be non-empty".into()));
        }
        Ok(LatentBatch { codes })
    }

    pub fn codes(&self) -> &Array2<f64> {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    Identity,
    /// Half resolution; 2x2 box averaging, which is what bilinear resampling
    /// with half-pixel centers reduces to at exactly half size.
    Downsample2x,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconSpec {
    pub target_transform: TargetTransform,
    pub weight: f64,
}

impl ReconSpec {
    pub fn target(&self, x: &Tensor) -> Result<Tensor> {
        match self.target_transform {
            TargetTransform::Identity => Ok(x.clone()),
            TargetTransform::Downsample2x => downsample2x(x),
        }
    }
}

pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape(format!("cannot halve a map of shape {s:?}")));
    }
    Ok(ArrayD::from_shape_fn(IxDyn(&[s[0], s[1], s[2] / 2, s[3] / 2]), |i| {
        let (b, c, h, w) = (i[0], i[1], 2 * i[2], 2 * i[3]);
        0.25 * (x[[b, c, h, w]] + x[[b, c, h, w + 1]] + x[[b, c, h + 1, w]] + x[[b, c, h + 1, w + 1]])
    }))
}

/// Weighted mean absolute error between `recon` and the transformed real
/// batch `x`.
pub fn recon_loss(tape: &Tape, recon: Var, x: &Tensor, spec: &ReconSpec) -> Result<Var> {
    if !(spec.weight >= 0.0) {
        return Err(Error::config("reconstruction weight must be nonnegative"));
    }
    let target = spec.target(x)?;
    if tape.shape(recon) != target.shape() {
        return Err(Error::shape(format!(
            "reconstruction {:?} does not match target {:?}",
            tape.shape(recon),
            target.shape()
        )));
    }
    let t = tape.constant(target);
    let d = tape.sub(recon, t)?;
    let a = tape.abs(d);
    let m = tape.mean(a);
    Ok(tape.scale(m, spec.weight))
}

#[derive(Debug, Clone)]
enum DiscBody {
    Mlp {
        hidden: Vec<Linear>,
        feature: Linear,
        decoder: [Linear; 2],
    },
    Conv {
        stages: Vec<(Conv, AttentionParams)>,
        projection: Linear,
        decoder: Conv,
    },
}

/// Outputs of one discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    /// Pre-head representation, `[B, D]`.
    pub features: Var,
    /// Two-class logits, `[B, 2]`.
    pub logits: Var,
    pub recon: Var,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: ModelConfig,
    params: ParamStore,
    body: DiscBody,
    head_w: ParamId,
    head_b: ParamId,
}

impl Discriminator {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.feature_dim;
        let body = match config.family {
            Family::Vector => {
                let w = config.hidden_width;
                let hidden = vec![
                    Linear::new(&mut store, "extractor.l0", config.data_dim, w, &mut rng),
                    Linear::new(&mut store, "extractor.l1", w, w, &mut rng),
                    Linear::new(&mut store, "extractor.l2", w, w, &mut rng),
                ];
                let feature = Linear::new(&mut store, "extractor.features", w, d, &mut rng);
                let decoder = [
                    Linear::new(&mut store, "decoder.l0", d, 64, &mut rng),
                    Linear::new(&mut store, "decoder.l1", 64, config.data_dim, &mut rng),
                ];
                DiscBody::Mlp {
                    hidden,
                    feature,
                    decoder,
                }
            }
            Family::Image => {
                let b = config.base_channels;
                let widths = [config.channels, b, 2 * b, 4 * b];
                let mut stages = Vec::new();
                for s in 0..3 {
                    let name = format!("extractor.s{s}");
                    let conv = Conv::new(&mut store, &format!("{name}.conv"), widths[s], widths[s + 1], 4, 2, 1, &mut rng);
                    let attn = AttentionParams::new(
                        &mut store,
                        &format!("{name}.attn"),
                        widths[s + 1],
                        config.attn_reduction,
                        config.attn_kernel,
                        &mut rng,
                    )?;
                    stages.push((conv, attn));
                }
                let side = config.resolution / 8;
                let projection = Linear::new(&mut store, "extractor.features", 4 * b * side * side, d, &mut rng);
                let decoder = Conv::new(&mut store, "decoder.conv", 2 * b, config.channels, 3, 1, 1, &mut rng);
                DiscBody::Conv {
                    stages,
                    projection,
                    decoder,
                }
            }
        };
        let head_w = store.add_normal("head.W", &[2, d], &mut rng);
        let head_b = store.add_const("head.b", &[2], 0.0);
        Ok(Discriminator {
            config: config.clone(),
            params: store,
            body,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn head(&self) -> ClassifierHead {
        let w = self.params.get(self.head_w).view().into_dimensionality::<Ix2>().expect("2-D head").to_owned();
        let b = self.params.get(self.head_b).view().into_dimensionality().expect("1-D bias").to_owned();
        ClassifierHead::new(w, b).expect("head shape fixed at construction")
    }

    /// Pass over a batch `x`; `p` is this model's parameters bound on `tape`.
    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<DiscOutput> {
        let batch = check_batch(tape, x, &self.config.sample_shape())?;
        let (features, recon) = match &self.body {
            DiscBody::Mlp {
                hidden,
                feature,
                decoder,
            } => {
                let mut h = x;
                for layer in hidden {
                    h = layer.forward(tape, p, h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                }
                let f = feature.forward(tape, p, h)?;
                let f = tape.leaky_relu(f, LEAKY_SLOPE);
                let r = decoder[0].forward(tape, p, f)?;
                let r = tape.leaky_relu(r, LEAKY_SLOPE);
                let r = decoder[1].forward(tape, p, r)?;
                (f, tape.tanh(r))
            }
            DiscBody::Conv {
                stages,
                projection,
                decoder,
            } => {
                let mut h = x;
                let mut intermediate = None;
                for (i, (conv, attn)) in stages.iter().enumerate() {
                    h = conv.forward(tape, p, h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                    h = attn.forward(tape, p, h)?;
                    if i == 1 {
                        intermediate = Some(h);
                    }
                }
                let flat_dim: usize = tape.shape(h)[1..].iter().product();
                let flat = tape.reshape(h, &[batch, flat_dim])?;
                let f = projection.forward(tape, p, flat)?;
                let f = tape.leaky_relu(f, LEAKY_SLOPE);
                let mid = intermediate.expect("three stages");
                let up = tape.upsample2x(mid)?;
                let r = decoder.forward(tape, p, up)?;
                (f, tape.tanh(r))
            }
        };
        let wt = tape.transpose(p[self.head_w.index()])?;
        let logits = tape.matmul(features, wt)?;
        let logits = tape.add(logits, p[self.head_b.index()])?;
        Ok(DiscOutput {
            features,
            logits,
            recon,
        })
    }

    /// Stage outputs of the image extractor with and without attention,
    /// for structural checks.
    pub fn extractor_stages(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Vec<(Var, Var)>> {
        check_batch(tape, x, &self.config.sample_shape())?;
        let DiscBody::Conv { stages, .. } = &self.body else {
            return Err(Error::config("only the image family has attention stages"));
        };
        let mut out = Vec::new();
        let mut h = x;
        for (conv, attn) in stages {
            let pre = conv.forward(tape, p, h)?;
            let pre = tape.leaky_relu(pre, LEAKY_SLOPE);
            h = attn.forward(tape, p, pre)?;
            out.push((pre, h));
        }
        Ok(out)
    }

    pub fn attention_blocks(&self) -> Vec<&AttentionParams> {
        match &self.body {
            DiscBody::Conv { stages, .. } => stages.iter().map(|(_, a)| a).collect(),
            DiscBody::Mlp { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
enum GenBody {
    Mlp {
        hidden: Vec<Linear>,
        out: Linear,
    },
    Conv {
        input: Linear,
        start: (usize, usize),
        ups: Vec<Conv>,
        out: Conv,
    },
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: ModelConfig,
    params: ParamStore,
    body: GenBody,
}

impl Generator {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let z = config.latent_dim;
        let body = match config.family {
            Family::Vector => {
                let w = config.hidden_width;
                let hidden = vec![
                    Linear::new(&mut store, "l0", z, w, &mut rng),
                    Linear::new(&mut store, "l1", w, w, &mut rng),
                    Linear::new(&mut store, "l2", w, w, &mut rng),
                ];
                let out = Linear::new(&mut store, "out", w, config.data_dim, &mut rng);
                GenBody::Mlp { hidden, out }
            }
            Family::Image => {
                let b = config.base_channels;
                let side = config.resolution / 8;
                let input = Linear::new(&mut store, "input", z, 4 * b * side * side, &mut rng);
                let widths = [4 * b, 2 * b, b, b];
                let ups = (0..3)
                    .map(|i| Conv::new(&mut store, &format!("up{i}"), widths[i], widths[i + 1], 3, 1, 1, &mut rng))
                    .collect();
                let out = Conv::new(&mut store, "out", b, config.channels, 3, 1, 1, &mut rng);
                GenBody::Conv {
                    input,
                    start: (4 * b, side),
                    ups,
                    out,
                }
            }
        };
        Ok(Generator {
            config: config.clone(),
            params: store,
            body,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Samples for latent codes `z` (`[B, latent_dim]`), in `[-1, 1]`.
    pub fn forward(&self, tape: &Tape, p: &[Var], z: Var) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.config.latent_dim || shape[0] == 0 {
            return Err(Error::shape(format!(
                "latent batch {shape:?} does not match latent dimension {}",
                self.config.latent_dim
            )));
        }
        let batch = shape[0];
        match &self.body {
            GenBody::Mlp { hidden, out } => {
                let mut h = z;
                for layer in hidden {
                    h = layer.forward(tape, p, h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                }
                let o = out.forward(tape, p, h)?;
                Ok(tape.tanh(o))
            }
            GenBody::Conv {
                input,
                start,
                ups,
                out,
            } => {
                let h = input.forward(tape, p, z)?;
                let h = tape.leaky_relu(h, LEAKY_SLOPE);
                let mut h = tape.reshape(h, &[batch, start.0, start.1, start.1])?;
                for conv in ups {
                    h = tape.upsample2x(h)?;
                    h = conv.forward(tape, p, h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                }
                let o = out.forward(tape, p, h)?;
                Ok(tape.tanh(o))
            }
        }
    }

    /// Forward pass without gradients.
    pub fn generate(&self, z: &LatentBatch) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let zv = tape.constant(z.codes().clone().into_dyn());
        let out = self.forward(&tape, &p, zv)?;
        let value = tape.get(out).clone();
        debug_assert_eq!(value.shape(), batch_shape(z.len(), &self.config.sample_shape()).as_slice());
        Ok(value)
    }
}
