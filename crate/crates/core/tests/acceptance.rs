//! End-to-end acceptance suite, one line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! `ASAGAN_ACCEPTANCE=1,5,9` restricts the run to the listed criteria.
//! The two training benchmarks (7 and 8) report their outcome but only
//! affect the exit status when `ASAGAN_STRICT_ACCEPTANCE=1` is set.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use asagan::checkpoint::load_checkpoint;
use asagan::data::{load_image_folder, synth_dataset, write_shapes_folder, Dataset, DatasetKind};
use asagan::loss::{cross_entropy, mgf_check, BoundInstance, GaussianAugmenter};
use asagan::nets::ModelConfig;
use asagan::stats::{oracle_stats, BatchStats, ClassId, ClassStats};
use asagan::trainer::{checkpoint_path, resume, train, GenLossMode, Objective, TrainConfig, FINAL_CHECKPOINT, LOG_FILE};
use common::{check, d_loss, g_loss, setup, small_vector, Instance};
use ndarray::{array, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit_s: f64,
    benchmark: bool,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "jensen bound suite", limit_s: 120.0, benchmark: false, run: jensen_bound },
    Criterion { id: 2, name: "zero-lambda degeneration", limit_s: 10.0, benchmark: false, run: zero_lambda },
    Criterion { id: 3, name: "mgf identity", limit_s: 10.0, benchmark: false, run: mgf_identity },
    Criterion { id: 4, name: "online statistics oracle", limit_s: 10.0, benchmark: false, run: online_stats },
    Criterion { id: 5, name: "gradient correctness", limit_s: 120.0, benchmark: false, run: gradients },
    Criterion { id: 6, name: "lambda monotonicity", limit_s: 10.0, benchmark: false, run: monotonicity },
    Criterion { id: 7, name: "ring benchmark", limit_s: 45.0 * 60.0, benchmark: true, run: ring_benchmark },
    Criterion { id: 8, name: "100-shot image run", limit_s: 90.0 * 60.0, benchmark: true, run: image_benchmark },
    Criterion { id: 9, name: "determinism and resume", limit_s: 300.0, benchmark: false, run: determinism },
    Criterion { id: 10, name: "augmentation distribution", limit_s: 30.0, benchmark: false, run: augmentation },
];

fn jensen_bound() -> Outcome {
    let (mut held, mut zero_ok, mut zero_total, mut worst) = (0, true, 0, f64::INFINITY);
    for i in 0..100 {
        let inst = BoundInstance::generate(i, 0);
        let r = inst.verify(100_000, 1000 + i as u64).unwrap();
        held += r.holds as usize;
        if inst.has_zero_covariance() {
            zero_total += 1;
            zero_ok &= r.gap() == 0.0;
        } else {
            worst = worst.min(r.gap() / r.mc_stderr);
        }
    }
    Outcome::new(
        held == 100 && zero_ok,
        format!("{held}/100 hold (bound >= mc_mean - 3 stderr), {zero_total} zero-covariance gaps exactly 0: {zero_ok}, smallest gap {worst:.2} stderr"),
    )
}

fn zero_lambda() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for i in 0..1000 {
        let inst = Instance::random(i, rng.random_range(1..=64), rng.random_range(1..=16));
        let ce = cross_entropy(&inst.batch, &inst.head).unwrap();
        worst = worst.max((inst.bound(0.0) - ce).abs() / ce.abs().max(f64::MIN_POSITIVE));
    }
    Outcome::new(worst <= 1e-12, format!("1000 instances, max relative error {worst:.2e} (<= 1e-12)"))
}

fn mgf_identity() -> Outcome {
    let r = mgf_check(0.0, 1.0, 1_000_000, 3).unwrap();
    let z = (r.empirical - r.analytic).abs() / r.stderr;
    Outcome::new(
        r.holds() && (r.analytic - 1.6487213).abs() < 5e-8,
        format!("analytic {:.7}, empirical {:.7}, |diff| = {z:.2} stderr (<= 3)", r.analytic, r.empirical),
    )
}

fn online_stats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0_f64;
    let rel = |a: &Array2<f64>, b: &Array2<f64>| {
        let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
        a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
    };
    for _ in 0..50 {
        let d = rng.random_range(1..=64);
        let n = rng.random_range(2..=1000);
        let shift: f64 = rng.random_range(-3.0..3.0);
        let x = Array2::from_shape_simple_fn((n, d), || shift + rng.random_range(-1.0..1.0));
        let mut st = ClassStats::new(d, ClassId::Real).unwrap();
        let mut start = 0;
        while start < n {
            let end = (start + rng.random_range(1..=64)).min(n);
            st.update(&BatchStats::from_features(x.slice(s![start..end, ..])).unwrap()).unwrap();
            start = end;
        }
        let oracle = oracle_stats(x.view(), ClassId::Real).unwrap();
        let row = |v: &ndarray::Array1<f64>| v.clone().insert_axis(Axis(0));
        worst = worst.max(rel(st.cov(), oracle.cov())).max(rel(&row(st.mean()), &row(oracle.mean())));
    }
    Outcome::new(worst <= 1e-10, format!("50 streams, max relative error {worst:.2e} (<= 1e-10)"))
}

fn gradients() -> Outcome {
    let s = setup(&small_vector(), 3);
    let mut worst = 0.0_f64;
    let mut groups = 0;
    for (lambda, objective) in [(0.7, Objective::Bound), (0.0, Objective::Bound)] {
        let (_, analytic) = d_loss(&s, &s.disc, lambda, objective, true);
        let errors = check(&s.disc, |d| d.params_mut(), |d| d_loss(&s, d, lambda, objective, false).0, &analytic, 1);
        groups += errors.len();
        worst = errors.iter().fold(worst, |m, e| m.max(e.1));
    }
    for mode in [GenLossMode::Nonsaturating, GenLossMode::PaperSaturating] {
        for lambda in [0.0, 1.3] {
            let (_, analytic) = g_loss(&s, &s.gen, lambda, mode, Objective::Bound, true);
            let errors = check(&s.gen, |g| g.params_mut(), |g| g_loss(&s, g, lambda, mode, Objective::Bound, false).0, &analytic, 1);
            groups += errors.len();
            worst = errors.iter().fold(worst, |m, e| m.max(e.1));
        }
    }
    Outcome::new(worst <= 1e-4, format!("{groups} parameter tensors checked, max relative error {worst:.2e} (<= 1e-4)"))
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for i in 0..200 {
        let inst = Instance::random(10_000 + i, rng.random_range(1..=32), rng.random_range(1..=8));
        let values: Vec<f64> = [0.0, 0.5, 1.0, 2.0].iter().map(|&l| inst.bound(l)).collect();
        violations += values.windows(2).filter(|w| w[1] < w[0] - 1e-12).count();
    }
    Outcome::new(violations == 0, format!("200 instances, {violations} decreasing steps over lambda in {{0, 0.5, 1, 2}}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct ArmResult {
    coverage: Vec<f64>,
    fd: Vec<f64>,
}

fn run_arm(data: &Dataset, model: &ModelConfig, steps: u64, asa: bool) -> ArmResult {
    let mut out = ArmResult { coverage: Vec::new(), fd: Vec::new() };
    for seed in 1..=3 {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            total_steps: steps,
            batch_size: 8,
            lambda_base: 1.0,
            augment_d: asa,
            augment_g: asa,
            seed,
            ..TrainConfig::default()
        };
        let eval = train(&config, model, data, dir.path()).unwrap().final_eval;
        out.coverage.push(eval.covered_modes.map_or(f64::NAN, |c| c as f64));
        out.fd.push(eval.fd_proxy);
    }
    out
}

fn ring_benchmark() -> Outcome {
    let data = synth_dataset(DatasetKind::Ring8, 512, 0).unwrap();
    let model = ModelConfig::vector(2);
    let base = run_arm(&data, &model, 20_000, false);
    let asa = run_arm(&data, &model, 20_000, true);
    let (cb, ca) = (median(base.coverage.clone()), median(asa.coverage.clone()));
    let (fb, fa) = (median(base.fd.clone()), median(asa.fd.clone()));
    Outcome::new(
        ca >= cb && fa <= 1.05 * fb,
        format!(
            "coverage baseline {:?} asa {:?} (median {ca} >= {cb}: {}), fd baseline {} asa {} (median {fa:.4} <= 1.05 x {fb:.4}: {})",
            base.coverage,
            asa.coverage,
            ca >= cb,
            fmt(&base.fd),
            fmt(&asa.fd),
            fa <= 1.05 * fb
        ),
    )
}

fn image_benchmark() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    write_shapes_folder(dir.path(), 100, 32, 0).unwrap();
    let data = load_image_folder(dir.path(), 32, 3).unwrap();
    let model = ModelConfig::image(3, 32);
    let base = run_arm(&data, &model, 10_000, false);
    let asa = run_arm(&data, &model, 10_000, true);
    let (fb, fa) = (median(base.fd.clone()), median(asa.fd.clone()));
    Outcome::new(fa <= fb, format!("fd baseline {} asa {} (median {fa:.4} <= {fb:.4})", fmt(&base.fd), fmt(&asa.fd)))
}

fn fmt(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "))
}

fn determinism() -> Outcome {
    let read = |p: &Path| fs::read(p).unwrap();
    let check_family = |data: &Dataset, model: &ModelConfig, steps: u64, every: u64| {
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let config = TrainConfig {
            total_steps: steps,
            eval_every: every,
            checkpoint_every: every,
            seed: 11,
            ..TrainConfig::default()
        };
        let whole = train(&config, model, data, a.path()).unwrap();
        train(&config, model, data, b.path()).unwrap();
        let same_log = read(&a.path().join(LOG_FILE)) == read(&b.path().join(LOG_FILE))
            && read(&a.path().join(FINAL_CHECKPOINT)) == read(&b.path().join(FINAL_CHECKPOINT));
        let ckpt = load_checkpoint(&checkpoint_path(a.path(), every)).unwrap();
        let rest = resume(&ckpt, &config, model, data, c.path()).unwrap();
        let same_resume = rest.records[..] == whole.records[every as usize..]
            && rest.final_eval == whole.final_eval
            && read(&a.path().join(FINAL_CHECKPOINT)) == read(&c.path().join(FINAL_CHECKPOINT));
        (same_log, same_resume)
    };
    let ring = synth_dataset(DatasetKind::Ring8, 512, 0).unwrap();
    let (ring_log, ring_resume) = check_family(&ring, &ModelConfig::vector(2), 300, 100);
    let imgs = tempfile::tempdir().unwrap();
    write_shapes_folder(imgs.path(), 16, 16, 0).unwrap();
    let shapes = load_image_folder(imgs.path(), 16, 3).unwrap();
    let (img_log, img_resume) = check_family(&shapes, &ModelConfig::image(3, 16), 20, 10);
    Outcome::new(
        ring_log && ring_resume && img_log && img_resume,
        format!("identical logs: ring {ring_log}, image {img_log}; resume matches: ring {ring_resume}, image {img_resume}"),
    )
}

fn augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 4;
    let a = Array2::from_shape_simple_fn((d, d), || rng.random_range(-1.0..1.0));
    let cov = a.dot(&a.t());
    let lambda = 0.8;
    let center = array![0.5, -1.0, 2.0, 0.0];
    let n = 1_000_000;
    let x = GaussianAugmenter::new(&cov, lambda).unwrap().sample(center.view(), n, &mut rng);
    let mean = x.mean_axis(Axis(0)).unwrap();
    let c = &x - &mean;
    let emp = c.t().dot(&c) / n as f64;
    let (mut worst_mean, mut worst_cov) = (0.0_f64, 0.0_f64);
    for i in 0..d {
        worst_mean = worst_mean.max((mean[i] - center[i]).abs() / (lambda * cov[[i, i]] / n as f64).sqrt());
        for j in 0..d {
            let var = lambda * lambda * (cov[[i, i]] * cov[[j, j]] + cov[[i, j]].powi(2));
            worst_cov = worst_cov.max((emp[[i, j]] - lambda * cov[[i, j]]).abs() / (var / n as f64).sqrt());
        }
    }
    Outcome::new(
        worst_mean <= 3.0 && worst_cov <= 3.0,
        format!("1e6 draws, max mean deviation {worst_mean:.2} stderr, max covariance deviation {worst_cov:.2} stderr (<= 3)"),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("ASAGAN_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("ASAGAN_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    for c in CRITERIA.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let pass = outcome.pass && secs <= c.limit_s;
        let tag = if pass { "PASS" } else { "FAIL" };
        let note = if c.benchmark && !strict { " [reported]" } else { "" };
        println!("criterion {:>2} {tag}{note} {}: {} ({secs:.1} s, limit {:.0} s)", c.id, c.name, outcome.detail, c.limit_s);
        if !pass && (strict || !c.benchmark) {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
