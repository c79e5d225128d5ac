//! The training loop: alternating discriminator and generator updates under
//! the augmented loss bound, running class statistics, checkpoints and a
//! line-delimited JSON log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor, Var};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{sample_latent, Dataset};
use crate::error::{Error, Result};
use crate::loss::lambda_schedule;
use crate::metrics::{embed, frechet_distance, median_bandwidth, mmd_rbf, mode_metrics, summarize, EmbeddingSpec, GaussianSummary, ModeSpec};
use crate::nets::{recon_loss, DiscOutput, Discriminator, Family, Generator, LatentBatch, ModelConfig, ParamStore, ReconSpec};
use crate::optim::{Adam, AdamConfig};
use crate::stats::{BatchStats, ClassId, ClassStats};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const EVAL_STREAM: u64 = 1;
const EVAL_CHUNK: usize = 64;
const MMD_MAX_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenLossMode {
    /// Maximize the bound on fakes labeled fake.
    PaperSaturating,
    /// Minimize the bound on fakes labeled real.
    Nonsaturating,
}

/// Adversarial term used by both players.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Augmented upper bound, driven by the running covariances.
    Bound,
    /// Ordinary two-class cross-entropy on the head's logits.
    PlainCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_base: f64,
    pub augment_d: bool,
    pub augment_g: bool,
    pub gen_loss_mode: GenLossMode,
    pub objective: Objective,
    pub recon_weight: f64,
    pub stats_decay: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    /// Generated samples per evaluation; 0 means the dataset size.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 10_000,
            batch_size: 8,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lambda_base: 1.0,
            augment_d: true,
            augment_g: true,
            gen_loss_mode: GenLossMode::Nonsaturating,
            objective: Objective::Bound,
            recon_weight: 1.0,
            stats_decay: 1.0,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            eval_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.adam().validate()?;
        if !(self.lambda_base >= 0.0) || !self.lambda_base.is_finite() {
            return Err(Error::config(format!("lambda_base must be finite and nonnegative, got {}", self.lambda_base)));
        }
        if !(self.recon_weight >= 0.0) || !self.recon_weight.is_finite() {
            return Err(Error::config(format!("recon_weight must be finite and nonnegative, got {}", self.recon_weight)));
        }
        if !(self.stats_decay > 0.0 && self.stats_decay <= 1.0) {
            return Err(Error::config(format!("stats_decay must lie in (0, 1], got {}", self.stats_decay)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }
}

/// Hex SHA-256 of the canonical JSON of both configurations.
pub fn config_digest(config: &TrainConfig, model: &ModelConfig) -> String {
    let json = serde_json::to_vec(&(config, model)).expect("configs serialize");
    hex::encode(Sha256::digest(json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub fd_proxy: f64,
    pub mmd: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub covered_modes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub high_quality_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub recon: f64,
    pub lambda: f64,
    pub stats_count_real: u64,
    pub stats_count_fake: u64,
    #[serde(flatten, skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalMetrics>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub stats_real: ClassStats,
    pub stats_fake: ClassStats,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig, model: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(model, rng.random())?;
        let discriminator = Discriminator::new(model, rng.random())?;
        Ok(TrainState {
            model: model.clone(),
            opt_g: Adam::new(config.adam(), generator.params())?,
            opt_d: Adam::new(config.adam(), discriminator.params())?,
            generator,
            discriminator,
            stats_real: ClassStats::new(model.feature_dim, ClassId::Real)?,
            stats_fake: ClassStats::new(model.feature_dim, ClassId::Fake)?,
            step: 0,
            rng,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::new(self.step, config_digest(config, &self.model));
        c.metadata = serde_json::json!({ "train": config, "model": self.model });
        c.rng_state = rng_bytes(&self.rng);
        let scalar = |v: f64| ArrayD::from_elem(IxDyn(&[]), v);
        for (prefix, store, opt) in [
            ("gen", self.generator.params(), &self.opt_g),
            ("disc", self.discriminator.params(), &self.opt_d),
        ] {
            for (name, value) in store.iter() {
                c.tensors.push((format!("{prefix}.{name}"), value.clone()));
            }
            for ((name, _), (m, v)) in store.iter().zip(opt.first_moments().iter().zip(opt.second_moments())) {
                c.tensors.push((format!("optim.{prefix}.m.{name}"), m.clone()));
                c.tensors.push((format!("optim.{prefix}.v.{name}"), v.clone()));
            }
            c.tensors.push((format!("optim.{prefix}.steps"), scalar(opt.steps() as f64)));
        }
        for st in [&self.stats_real, &self.stats_fake] {
            let p = format!("stats.{}", st.class().name());
            c.tensors.push((format!("{p}.mean"), st.mean().clone().into_dyn()));
            c.tensors.push((format!("{p}.cov"), st.cov().clone().into_dyn()));
            c.tensors.push((format!("{p}.count"), scalar(st.count() as f64)));
            c.tensors.push((format!("{p}.weight"), scalar(st.weight())));
        }
        c
    }

    /// Restores a state saved under the same configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &TrainConfig, model: &ModelConfig) -> Result<Self> {
        ckpt.expect_digest(&config_digest(config, model))?;
        let mut state = TrainState::new(config, model)?;
        let scalar = |name: &str| -> Result<f64> {
            let t = ckpt.tensor(name)?;
            if t.ndim() != 0 {
                return Err(Error::CheckpointCorrupt(format!("{name} is not a scalar")));
            }
            Ok(t[IxDyn(&[])])
        };
        let restore = |prefix: &str, store: &mut ParamStore| -> Result<Adam> {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for name in &names {
                store.set(name, ckpt.tensor(&format!("{prefix}.{name}"))?.clone())?;
                m.push(ckpt.tensor(&format!("optim.{prefix}.m.{name}"))?.clone());
                v.push(ckpt.tensor(&format!("optim.{prefix}.v.{name}"))?.clone());
            }
            let steps = scalar(&format!("optim.{prefix}.steps"))? as u64;
            let opt = Adam::from_parts(config.adam(), m, v, steps)?;
            for (p, mm) in store.values().iter().zip(opt.first_moments()) {
                if p.shape() != mm.shape() {
                    return Err(Error::CheckpointCorrupt(format!("optimizer moments of {prefix} have wrong shapes")));
                }
            }
            Ok(opt)
        };
        state.opt_g = restore("gen", state.generator.params_mut())?;
        state.opt_d = restore("disc", state.discriminator.params_mut())?;
        for class in [ClassId::Real, ClassId::Fake] {
            let p = format!("stats.{}", class.name());
            let mean = ckpt.tensor(&format!("{p}.mean"))?.clone().into_dimensionality::<Ix1>();
            let cov = ckpt.tensor(&format!("{p}.cov"))?.clone().into_dimensionality::<Ix2>();
            let (Ok(mean), Ok(cov)) = (mean, cov) else {
                return Err(Error::CheckpointCorrupt(format!("{p} has wrong rank")));
            };
            let st = ClassStats::from_parts(class, mean, cov, scalar(&format!("{p}.count"))? as u64, scalar(&format!("{p}.weight"))?)?;
            if st.dim() != model.feature_dim {
                return Err(Error::CheckpointCorrupt(format!("{p} has dimension {}", st.dim())));
            }
            match class {
                ClassId::Real => state.stats_real = st,
                ClassId::Fake => state.stats_fake = st,
            }
        }
        state.rng = rng_from_bytes(&ckpt.rng_state)?;
        state.step = ckpt.step;
        Ok(state)
    }
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut b = rng.get_seed().to_vec();
    b.extend_from_slice(&rng.get_stream().to_le_bytes());
    b.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    b
}

fn rng_from_bytes(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != 56 {
        return Err(Error::CheckpointCorrupt(format!("rng state has {} bytes", b.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

fn check_data(state: &TrainState, data: &Dataset) -> Result<()> {
    if data.sample_shape() != state.model.sample_shape().as_slice() {
        return Err(Error::shape(format!(
            "dataset samples {:?} do not match model samples {:?}",
            data.sample_shape(),
            state.model.sample_shape()
        )));
    }
    Ok(())
}

fn collect_grads(grads: &mut crate::autograd::Gradients, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn all_finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
}

fn adversarial(
    tape: &Tape,
    disc: &Discriminator,
    p: &[Var],
    out: &crate::nets::DiscOutput,
    labels: &[usize],
    covs: &[&Array2<f64>],
    lambda: f64,
    objective: Objective,
) -> Result<Var> {
    match objective {
        Objective::Bound => {
            let (w, b) = disc.head_ids();
            tape.asa_bound(out.features, p[w.index()], p[b.index()], labels, covs, lambda)
        }
        Objective::PlainCrossEntropy => tape.cross_entropy(out.logits, labels),
    }
}

/// Discriminator objective on `out`, the forward pass of a batch whose first
/// half is `x_real` and second half generated. Returns the total loss and its
/// reconstruction part.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss(
    tape: &Tape,
    disc: &Discriminator,
    p: &[Var],
    out: &DiscOutput,
    x_real: &Tensor,
    cov_real: &Array2<f64>,
    cov_fake: &Array2<f64>,
    lambda: f64,
    objective: Objective,
    spec: &ReconSpec,
) -> Result<(Var, Var)> {
    let b = x_real.shape()[0];
    let n = tape.shape(out.features)[0];
    if n != 2 * b {
        return Err(Error::shape(format!("{n} feature rows for {b} real samples")));
    }
    let labels: Vec<usize> = (0..n).map(|i| if i < b { ClassId::Real.label() } else { ClassId::Fake.label() }).collect();
    let covs: Vec<&Array2<f64>> = (0..n).map(|i| if i < b { cov_real } else { cov_fake }).collect();
    let adv = adversarial(tape, disc, p, out, &labels, &covs, lambda, objective)?;
    let recon_real = tape.rows(out.recon, 0, b)?;
    let recon = recon_loss(tape, recon_real, x_real, spec)?;
    Ok((tape.add(adv, recon)?, recon))
}

/// Generator objective for latent batch `z` against the discriminator bound
/// as `pd` (normally frozen).
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    tape: &Tape,
    generator: &Generator,
    pg: &[Var],
    disc: &Discriminator,
    pd: &[Var],
    z: &LatentBatch,
    cov_fake: &Array2<f64>,
    lambda: f64,
    mode: GenLossMode,
    objective: Objective,
) -> Result<Var> {
    let zv = tape.constant(z.codes().clone().into_dyn());
    let gen = generator.forward(tape, pg, zv)?;
    let out = disc.forward(tape, pd, gen)?;
    let covs = vec![cov_fake; z.len()];
    let label = match mode {
        GenLossMode::Nonsaturating => ClassId::Real,
        GenLossMode::PaperSaturating => ClassId::Fake,
    };
    let l = adversarial(tape, disc, pd, &out, &vec![label.label(); z.len()], &covs, lambda, objective)?;
    Ok(match mode {
        GenLossMode::Nonsaturating => l,
        GenLossMode::PaperSaturating => tape.scale(l, -1.0),
    })
}

/// One iteration: real and fake batches, statistics update, one
/// discriminator step, one generator step.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, data: &Dataset) -> Result<TrainLogRecord> {
    check_data(state, data)?;
    let t = state.step;
    if t >= config.total_steps {
        return Err(Error::config(format!("step {t} is past total_steps {}", config.total_steps)));
    }
    let b = config.batch_size;
    let idx: Vec<usize> = (0..b).map(|_| state.rng.random_range(0..data.len())).collect();
    let x_real = data.select(&idx);
    let z = sample_latent(&mut state.rng, b, state.model.latent_dim)?;
    let fakes = state.generator.generate(&z)?;

    let lambda = lambda_schedule(t, config.total_steps, config.lambda_base)?;
    let lambda_d = if config.augment_d { lambda } else { 0.0 };
    let lambda_g = if config.augment_g { lambda } else { 0.0 };
    let spec = state.model.recon_spec(config.recon_weight);

    // Discriminator.
    let tape = Tape::new();
    let pd = state.discriminator.params().bind(&tape, true);
    let both = concatenate(Axis(0), &[x_real.view(), fakes.view()]).map_err(|e| Error::shape(e.to_string()))?;
    let x = tape.constant(both);
    let out = state.discriminator.forward(&tape, &pd, x)?;
    {
        let f = tape.get(out.features);
        let f = f.view().into_dimensionality::<Ix2>().expect("2-D features");
        state.stats_real.update_with_decay(&BatchStats::from_features(f.slice(s![..b, ..]))?, config.stats_decay)?;
        state.stats_fake.update_with_decay(&BatchStats::from_features(f.slice(s![b.., ..]))?, config.stats_decay)?;
    }
    let (loss_d, recon) = discriminator_loss(
        &tape,
        &state.discriminator,
        &pd,
        &out,
        &x_real,
        state.stats_real.cov(),
        state.stats_fake.cov(),
        lambda_d,
        config.objective,
        &spec,
    )?;
    let (loss_d_value, recon_value) = (tape.scalar(loss_d), tape.scalar(recon));
    let mut grads = tape.backward(loss_d);
    let grads_d = collect_grads(&mut grads, &pd);
    drop(grads);

    // Generator, against the updated discriminator.
    let tape_g = Tape::new();
    let pg = state.generator.params().bind(&tape_g, true);
    let finite_d = loss_d_value.is_finite() && all_finite(&grads_d);
    if finite_d {
        state.opt_d.step(state.discriminator.params_mut(), &grads_d)?;
    }
    let pd_frozen = state.discriminator.params().bind(&tape_g, false);
    let loss_g = generator_loss(
        &tape_g,
        &state.generator,
        &pg,
        &state.discriminator,
        &pd_frozen,
        &z,
        state.stats_fake.cov(),
        lambda_g,
        config.gen_loss_mode,
        config.objective,
    )?;
    let loss_g_value = tape_g.scalar(loss_g);
    let mut grads = tape_g.backward(loss_g);
    let grads_g = collect_grads(&mut grads, &pg);

    let record = TrainLogRecord {
        step: t,
        loss_d: loss_d_value,
        loss_g: loss_g_value,
        recon: recon_value,
        lambda,
        stats_count_real: state.stats_real.count(),
        stats_count_fake: state.stats_fake.count(),
        eval: None,
    };
    if !finite_d || !loss_g_value.is_finite() || !all_finite(&grads_g) {
        return Err(Error::NonFinite {
            step: t,
            record: serde_json::to_string(&record).expect("record serializes"),
        });
    }
    state.opt_g.step(state.generator.params_mut(), &grads_g)?;
    state.step += 1;
    Ok(record)
}

/// Fixed reference statistics of the training set for periodic evaluation.
#[derive(Debug, Clone)]
pub struct Evaluator {
    embedding: EmbeddingSpec,
    reference: GaussianSummary,
    reference_rows: Array2<f64>,
    mode_spec: Option<ModeSpec>,
    samples: usize,
    seed: u64,
}

/// Embedding used for a model family: identity for points, a fixed random
/// convolutional network for images.
pub fn default_embedding(model: &ModelConfig) -> EmbeddingSpec {
    match model.family {
        Family::Vector => EmbeddingSpec::identity(model.data_dim),
        Family::Image => EmbeddingSpec::random_conv(0, 64),
    }
}

impl Evaluator {
    pub fn new(data: &Dataset, embedding: EmbeddingSpec, samples: usize, seed: u64) -> Result<Self> {
        let rows = embed(data.samples(), &embedding)?;
        Ok(Evaluator {
            embedding,
            reference: summarize(rows.view())?,
            reference_rows: rows,
            mode_spec: data.mode_spec().cloned(),
            samples: if samples == 0 { data.len() } else { samples },
            seed,
        })
    }

    pub fn for_training(data: &Dataset, config: &TrainConfig, model: &ModelConfig) -> Result<Self> {
        Self::new(data, default_embedding(model), config.eval_samples, config.seed)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Latent codes used for every evaluation; the same for every call.
    pub fn latents(&self, dim: usize) -> Result<LatentBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(EVAL_STREAM);
        sample_latent(&mut rng, self.samples, dim)
    }

    pub fn generate(&self, generator: &Generator) -> Result<Tensor> {
        let z = self.latents(generator.config().latent_dim)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < z.len() {
            let end = (start + EVAL_CHUNK).min(z.len());
            let chunk = LatentBatch::new(z.codes().slice(s![start..end, ..]).to_owned())?;
            parts.push(generator.generate(&chunk)?);
            start = end;
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
    }

    pub fn evaluate_samples(&self, samples: &Tensor) -> Result<EvalMetrics> {
        let rows = embed(samples, &self.embedding)?;
        let fd = frechet_distance(&summarize(rows.view())?, &self.reference)?;
        let a = rows.slice(s![..rows.nrows().min(MMD_MAX_SAMPLES), ..]);
        let r = self.reference_rows.slice(s![..self.reference_rows.nrows().min(MMD_MAX_SAMPLES), ..]);
        let mmd = mmd_rbf(a, r, median_bandwidth(a, r)?)?;
        let modes = match (&self.mode_spec, samples.ndim()) {
            (Some(spec), 2) => Some(mode_metrics(samples.view().into_dimensionality().expect("2-D"), spec)?),
            _ => None,
        };
        Ok(EvalMetrics {
            fd_proxy: fd,
            mmd,
            covered_modes: modes.as_ref().map(|m| m.covered_modes),
            high_quality_fraction: modes.map(|m| m.high_quality_fraction),
        })
    }

    pub fn evaluate(&self, generator: &Generator) -> Result<EvalMetrics> {
        self.evaluate_samples(&self.generate(generator)?)
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<TrainLogRecord>,
    pub final_checkpoint: PathBuf,
    pub final_eval: EvalMetrics,
}

fn step_io(step: u64, e: Error) -> Error {
    Error::StepIo {
        step,
        source: Box::new(e),
    }
}

fn write_record(log: &mut BufWriter<File>, record: &TrainLogRecord, path: &Path) -> Result<()> {
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(log, "{line}").map_err(|e| step_io(record.step, Error::io(path, e)))
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

fn run(
    mut state: TrainState,
    config: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    append: bool,
) -> Result<TrainOutcome> {
    check_data(&state, data)?;
    fs::create_dir_all(out_dir).map_err(|e| step_io(state.step, Error::io(out_dir, e)))?;
    let evaluator = Evaluator::for_training(data, config, &state.model)?;
    let log_path = out_dir.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| step_io(state.step, Error::io(&log_path, e)))?;
    let mut log = BufWriter::new(file);
    let mut records = Vec::new();
    while state.step < config.total_steps {
        let mut record = match train_step(&mut state, config, data) {
            Ok(r) => r,
            Err(Error::NonFinite { step, record }) => {
                let _ = writeln!(log, "{record}");
                let _ = log.flush();
                return Err(Error::NonFinite { step, record });
            }
            Err(e) => return Err(e),
        };
        let done = state.step;
        if config.eval_every > 0 && done % config.eval_every == 0 {
            record.eval = Some(evaluator.evaluate(&state.generator)?);
        }
        write_record(&mut log, &record, &log_path)?;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.total_steps {
            let path = checkpoint_path(out_dir, done);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| step_io(record.step, Error::io(parent, e)))?;
            }
            log.flush().map_err(|e| step_io(record.step, Error::io(&log_path, e)))?;
            save_checkpoint(&state.to_checkpoint(config), &path).map_err(|e| step_io(record.step, e))?;
        }
        records.push(record);
    }
    log.flush().map_err(|e| step_io(state.step, Error::io(&log_path, e)))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&state.to_checkpoint(config), &final_checkpoint).map_err(|e| step_io(state.step, e))?;
    let final_eval = evaluator.evaluate(&state.generator)?;
    Ok(TrainOutcome {
        state,
        records,
        final_checkpoint,
        final_eval,
    })
}

/// Trains from scratch, writing the log, checkpoints and the final
/// checkpoint under `out_dir`.
pub fn train(config: &TrainConfig, model: &ModelConfig, data: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    run(TrainState::new(config, model)?, config, data, out_dir, false)
}

/// Continues a run from `ckpt`, appending to the log in `out_dir`.
pub fn resume(
    ckpt: &Checkpoint,
    config: &TrainConfig,
    model: &ModelConfig,
    data: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    run(TrainState::from_checkpoint(ckpt, config, model)?, config, data, out_dir, true)
}

/// Recovers the model configuration stored in a checkpoint's metadata.
pub fn checkpoint_configs(ckpt: &Checkpoint) -> Result<(TrainConfig, ModelConfig)> {
    let get = |k: &str| ckpt.metadata.get(k).cloned().ok_or_else(|| Error::CheckpointCorrupt(format!("metadata lacks {k}")));
    let train = serde_json::from_value(get("train")?).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    let model = serde_json::from_value(get("model")?).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    Ok((train, model))
}

/// Loads only the generator weights from a checkpoint.
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<Generator> {
    let (_, model) = checkpoint_configs(ckpt)?;
    let mut g = Generator::new(&model, 0)?;
    let names: Vec<String> = g.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        g.params_mut().set(&name, ckpt.tensor(&format!("gen.{name}"))?.clone())?;
    }
    Ok(g)
}
