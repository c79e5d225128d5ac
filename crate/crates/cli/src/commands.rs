use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use asagan::autograd::Tensor;
use asagan::checkpoint::{load_checkpoint, Checkpoint};
use asagan::data::{load_image_folder, nshot_subset, synth_dataset, write_delimited, Dataset, DatasetKind, LatentSampler};
use asagan::loss::{mgf_check, BoundInstance};
use asagan::nets::{Generator, LatentBatch, ModelConfig};
use asagan::trainer::{self, generator_from_checkpoint, EvalMetrics, Evaluator};
use ndarray::{concatenate, s, Array2, Axis, Ix2};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

const GEN_CHUNK: usize = 64;
const MGF_CASES: [(f64, f64); 4] = [(0.0, 1.0), (0.5, 0.25), (-1.0, 2.0), (0.0, 0.0)];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record serializes")
}

pub fn dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let data = match cfg.data_kind()? {
        DatasetKind::ImageFolder => {
            let path = cfg.path("data_path").ok_or_else(|| CliError::Usage("data_path is required".into()))?;
            load_image_folder(&path, cfg.get("resolution")?, cfg.get("channels")?)?
        }
        kind => synth_dataset(kind, cfg.get("n_samples")?, cfg.get("data_seed")?)?,
    };
    match cfg.get::<usize>("n_shot")? {
        0 => Ok(data),
        n => Ok(nshot_subset(&data, n, cfg.get("data_seed")?)?),
    }
}

fn check_shapes(data: &Dataset, model: &ModelConfig) -> Result<(), CliError> {
    if data.sample_shape() != model.sample_shape().as_slice() {
        return Err(CliError::Usage(format!(
            "dataset samples {:?} do not match the model's {:?}",
            data.sample_shape(),
            model.sample_shape()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    checkpoint: &'a Path,
    step: u64,
    samples: usize,
    #[serde(flatten)]
    metrics: &'a EvalMetrics,
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let config = cfg.train_config()?;
    let model = cfg.model_config()?;
    let resume = cfg.path("resume").map(|p| load_checkpoint(&p)).transpose()?;
    let data = dataset(cfg)?;
    check_shapes(&data, &model)?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    write_file(&out.join("resolved.cfg"), cfg.render().as_bytes())?;
    let outcome = match &resume {
        Some(ckpt) => trainer::resume(ckpt, &config, &model, &data, &out)?,
        None => trainer::train(&config, &model, &data, &out)?,
    };
    let record = MetricsRecord {
        checkpoint: &outcome.final_checkpoint,
        step: outcome.state.step,
        samples: if config.eval_samples == 0 { data.len() } else { config.eval_samples },
        metrics: &outcome.final_eval,
    };
    let line = json_line(&record);
    write_file(&out.join("metrics.json"), format!("{line}\n").as_bytes())?;
    println!("{line}");
    Ok(())
}

fn checkpoint_arg(cfg: &RunConfig) -> Result<(PathBuf, Checkpoint), CliError> {
    let path = cfg
        .path("checkpoint")
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let ckpt = load_checkpoint(&path)?;
    Ok((path, ckpt))
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let (path, ckpt) = checkpoint_arg(cfg)?;
    let generator = generator_from_checkpoint(&ckpt)?;
    let data = dataset(cfg)?;
    check_shapes(&data, generator.config())?;
    let evaluator = Evaluator::new(&data, cfg.embedding_for(generator.config())?, cfg.get("eval_samples")?, cfg.get("seed")?)?;
    let metrics = evaluator.evaluate(&generator)?;
    let line = json_line(&MetricsRecord {
        checkpoint: &path,
        step: ckpt.step,
        samples: evaluator.samples(),
        metrics: &metrics,
    });
    let out = cfg.output_dir();
    create_dir(&out)?;
    write_file(&out.join("eval.json"), format!("{line}\n").as_bytes())?;
    println!("{line}");
    Ok(())
}

fn generate(generator: &Generator, codes: &Array2<f64>) -> Result<Tensor, CliError> {
    let mut parts = Vec::new();
    for start in (0..codes.nrows()).step_by(GEN_CHUNK) {
        let end = (start + GEN_CHUNK).min(codes.nrows());
        parts.push(generator.generate(&LatentBatch::new(codes.slice(s![start..end, ..]).to_owned())?)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| CliError::Runtime(e.to_string()))
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tiles `[N, C, H, W]` images row-major into a grid with `cols` columns and
/// a 2-pixel border.
pub fn image_grid(images: &Tensor, cols: usize) -> Result<image::RgbImage, CliError> {
    let sh = images.shape();
    if sh.len() != 4 || !matches!(sh[1], 1 | 3) || cols == 0 {
        return Err(CliError::Runtime(format!("cannot tile samples of shape {sh:?}")));
    }
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let rows = n.div_ceil(cols);
    let pad = 2;
    let (gw, gh) = (cols * (w + pad) + pad, rows * (h + pad) + pad);
    let mut img = image::RgbImage::new(gw as u32, gh as u32);
    for k in 0..n {
        let (ox, oy) = (pad + (k % cols) * (w + pad), pad + (k / cols) * (h + pad));
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| to_byte(images[[k, if c == 1 { 0 } else { ch }, y, x]]);
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    Ok(img)
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| io_err(path, e))
}

fn write_rows(rows: &Array2<f64>, path: &Path) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_delimited(rows.view(), &mut buf).expect("writing to memory");
    write_file(path, &buf)
}

pub fn sample(cfg: &RunConfig) -> Result<(), CliError> {
    let n: usize = cfg.get("n")?;
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let (_, ckpt) = checkpoint_arg(cfg)?;
    let generator = generator_from_checkpoint(&ckpt)?;
    let codes = LatentSampler::new(cfg.get("seed")?).sample(n, generator.config().latent_dim)?;
    let samples = generate(&generator, codes.codes())?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    let path = match samples.view().into_dimensionality::<Ix2>() {
        Ok(rows) => {
            let p = out.join("samples.csv");
            write_rows(&rows.to_owned(), &p)?;
            p
        }
        Err(_) => {
            let p = out.join("samples.png");
            let cols = (n as f64).sqrt().ceil() as usize;
            save_png(&image_grid(&samples, cols)?, &p)?;
            p
        }
    };
    println!("{}", path.display());
    Ok(())
}

/// Codes `(1 - a) z1 + a z2` for `a = i / (steps - 1)`, pair by pair.
pub fn interpolation_codes(ends: &Array2<f64>, steps: usize) -> Array2<f64> {
    let pairs = ends.nrows() / 2;
    let mut codes = Array2::zeros((pairs * steps, ends.ncols()));
    for p in 0..pairs {
        let (z1, z2) = (ends.row(2 * p), ends.row(2 * p + 1));
        for i in 0..steps {
            let a = i as f64 / (steps - 1) as f64;
            let mut row = codes.row_mut(p * steps + i);
            for (k, v) in row.iter_mut().enumerate() {
                *v = (1.0 - a) * z1[k] + a * z2[k];
            }
        }
    }
    codes
}

pub fn interpolate(cfg: &RunConfig) -> Result<(), CliError> {
    let steps: usize = cfg.get("steps")?;
    let pairs: usize = cfg.get("pairs")?;
    if steps < 2 {
        return Err(CliError::Usage("--steps must be at least 2".into()));
    }
    if pairs == 0 {
        return Err(CliError::Usage("--pairs must be at least 1".into()));
    }
    let (_, ckpt) = checkpoint_arg(cfg)?;
    let generator = generator_from_checkpoint(&ckpt)?;
    let ends = LatentSampler::new(cfg.get("seed")?).sample(2 * pairs, generator.config().latent_dim)?;
    let samples = generate(&generator, &interpolation_codes(ends.codes(), steps))?;
    let out = cfg.output_dir();
    create_dir(&out)?;
    let path = match samples.view().into_dimensionality::<Ix2>() {
        Ok(rows) => {
            let p = out.join("interpolation.csv");
            let mut table = Array2::zeros((rows.nrows(), rows.ncols() + 3));
            for (r, mut row) in table.outer_iter_mut().enumerate() {
                let (pair, i) = (r / steps, r % steps);
                row[0] = pair as f64;
                row[1] = i as f64;
                row[2] = i as f64 / (steps - 1) as f64;
                row.slice_mut(s![3..]).assign(&rows.row(r));
            }
            write_rows(&table, &p)?;
            p
        }
        Err(_) => {
            let p = out.join("interpolation.png");
            save_png(&image_grid(&samples, steps)?, &p)?;
            p
        }
    };
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct BoundRecord {
    instance_id: usize,
    #[serde(rename = "D")]
    dim: usize,
    lambda: f64,
    #[serde(rename = "S")]
    draws: usize,
    zero_covariance: bool,
    bound: f64,
    mc_mean: f64,
    mc_stderr: f64,
    gap: f64,
    holds: bool,
}

#[derive(Serialize)]
struct MgfRecord {
    mgf_case: usize,
    mu: f64,
    var: f64,
    empirical: f64,
    analytic: f64,
    stderr: f64,
    holds: bool,
}

pub fn verify_bound(cfg: &RunConfig) -> Result<(), CliError> {
    let instances: usize = cfg.get("instances")?;
    let draws: usize = cfg.get("draws")?;
    let mgf_draws: usize = cfg.get("mgf_draws")?;
    let seed: u64 = cfg.get("seed")?;
    let self_test: bool = cfg.get("self_test")?;
    if draws == 0 || mgf_draws == 0 {
        return Err(CliError::Usage("draws and mgf_draws must be at least 1".into()));
    }
    let out = cfg.output_dir();
    create_dir(&out)?;
    let path = out.join("verify_bound.jsonl");
    let mut lines = Vec::new();
    let mut violations = Vec::new();
    for i in 0..instances {
        let inst = BoundInstance::generate(i, seed);
        let mut report = inst.verify(draws, seed.wrapping_add(i as u64))?;
        if self_test {
            report = report.with_bound(report.mc_mean - 3.0 * report.mc_stderr - 1.0);
        }
        let line = json_line(&BoundRecord {
            instance_id: i,
            dim: inst.dim(),
            lambda: inst.lambda,
            draws: report.samples,
            zero_covariance: inst.has_zero_covariance(),
            bound: report.bound,
            mc_mean: report.mc_mean,
            mc_stderr: report.mc_stderr,
            gap: report.gap(),
            holds: report.holds,
        });
        if !report.holds {
            violations.push(line.clone());
        }
        lines.push(line);
    }
    for (k, &(mu, var)) in MGF_CASES.iter().enumerate() {
        let r = mgf_check(mu, var, mgf_draws, seed.wrapping_add(k as u64))?;
        let line = json_line(&MgfRecord {
            mgf_case: k,
            mu,
            var,
            empirical: r.empirical,
            analytic: r.analytic,
            stderr: r.stderr,
            holds: r.holds(),
        });
        if !r.holds() {
            violations.push(line.clone());
        }
        lines.push(line);
    }
    let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    for l in &lines {
        writeln!(f, "{l}").map_err(|e| io_err(&path, e))?;
    }
    let checks = instances + MGF_CASES.len();
    println!("{} of {checks} checks hold; records in {}", checks - violations.len(), path.display());
    if violations.is_empty() {
        Ok(())
    } else {
        for v in &violations {
            eprintln!("violated: {v}");
        }
        Err(CliError::Verification(format!("{} of {checks} checks violated", violations.len())))
    }
}
