mod common;

use asagan::loss::{
    asa_upper_bound, cross_entropy, mgf_check, sampled_asa_loss, verify_jensen_bound, ClassifierHead, GaussianAugmenter,
};
use common::Instance;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bound_is_monotone_in_lambda(seed in any::<u64>(), d in 1usize..24, b in 1usize..9) {
        let inst = Instance::random(seed, d, b);
        let values: Vec<f64> = [0.0, 0.5, 1.0, 2.0].iter().map(|&l| inst.bound(l)).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{:?}", values);
        }
    }

    #[test]
    fn zero_lambda_is_cross_entropy(seed in any::<u64>(), d in 1usize..32, b in 1usize..9) {
        let inst = Instance::random(seed, d, b);
        let ce = cross_entropy(&inst.batch, &inst.head).unwrap();
        let bound = inst.bound(0.0);
        prop_assert!((bound - ce).abs() <= 1e-12 * ce.abs().max(f64::MIN_POSITIVE), "{} vs {}", bound, ce);
    }

    #[test]
    fn zero_head_gives_log_two(seed in any::<u64>(), d in 1usize..16, lambda in 0.0f64..3.0) {
        let mut inst = Instance::random(seed, d, 4);
        inst.head = ClassifierHead::zeros(2, d).unwrap();
        prop_assert!((inst.bound(lambda) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bound_gradients_match_differences(seed in any::<u64>(), d in 1usize..8, lambda in 0.0f64..2.0) {
        let inst = Instance::random(seed, d, 3);
        let covs = inst.covs();
        let f = inst.batch.features().clone();
        let labels = inst.batch.labels().to_vec();
        let g = asa_upper_bound(f.view(), &labels, &inst.head, &covs, lambda).unwrap();
        let h = 1e-5;
        let value = |f: &Array2<f64>, head: &ClassifierHead| asa_upper_bound(f.view(), &labels, head, &covs, lambda).unwrap().value;
        let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(1e-6);
        for idx in [(0, 0), (2, d - 1)] {
            let (mut up, mut down) = (f.clone(), f.clone());
            up[idx] += h;
            down[idx] -= h;
            let fd = (value(&up, &inst.head) - value(&down, &inst.head)) / (2.0 * h);
            prop_assert!(rel(g.grad_features[idx], fd) <= 1e-4);
        }
        for idx in [(0, 0), (1, d - 1)] {
            let shifted = |delta: f64| {
                let mut w = inst.head.weights().clone();
                w[idx] += delta;
                ClassifierHead::new(w, inst.head.biases().clone()).unwrap()
            };
            let fd = (value(&f, &shifted(h)) - value(&f, &shifted(-h))) / (2.0 * h);
            prop_assert!(rel(g.grad_weights[idx], fd) <= 1e-4);
        }
        let shifted = |delta: f64| {
            let mut b = inst.head.biases().clone();
            b[1] += delta;
            ClassifierHead::new(inst.head.weights().clone(), b).unwrap()
        };
        let fd = (value(&f, &shifted(h)) - value(&f, &shifted(-h))) / (2.0 * h);
        prop_assert!(rel(g.grad_biases[1], fd) <= 1e-4);
    }
}

#[test]
fn bound_dominates_monte_carlo_at_d4() {
    let inst = Instance::random(21, 4, 2);
    let r = verify_jensen_bound(inst.batch.features().view(), inst.batch.labels(), &inst.head, &inst.covs(), 0.7, 100_000, 3)
        .unwrap();
    assert!(r.holds, "{r:?}");
    assert!(r.gap() > 0.0);
}

#[test]
fn monte_carlo_seeds_agree() {
    let inst = Instance::random(8, 4, 2);
    let covs = inst.covs();
    let est = |seed| sampled_asa_loss(inst.batch.features().view(), inst.batch.labels(), &inst.head, &covs, 0.9, 100_000, seed).unwrap();
    let (a, b) = (est(1), est(2));
    let combined = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() <= 3.0 * combined, "{a:?} {b:?}");
}

#[test]
fn sampled_loss_without_variance_is_cross_entropy() {
    let inst = Instance::random(9, 6, 4);
    let ce = cross_entropy(&inst.batch, &inst.head).unwrap();
    let zero = Array2::zeros((6, 6));
    for (covs, lambda) in [(inst.covs(), 0.0), (vec![&zero; 4], 1.5)] {
        for draws in [1, 7] {
            let est = sampled_asa_loss(inst.batch.features().view(), inst.batch.labels(), &inst.head, &covs, lambda, draws, 0).unwrap();
            assert!((est.mean - ce).abs() <= 1e-12 * ce);
            assert_eq!(est.stderr, 0.0);
        }
    }
}

#[test]
fn gap_shrinks_as_lambda_goes_to_zero() {
    let inst = Instance::random(30, 4, 2);
    let covs = inst.covs();
    let mut last = f64::INFINITY;
    for lambda in [2.0, 1.0, 0.5, 0.25, 0.1, 0.0] {
        let r = verify_jensen_bound(inst.batch.features().view(), inst.batch.labels(), &inst.head, &covs, lambda, 100_000, 5)
            .unwrap();
        assert!(r.gap() <= last + 3.0 * r.mc_stderr, "lambda {lambda}: gap {} after {last}", r.gap());
        last = r.gap();
    }
    assert_eq!(last, 0.0);
}

#[test]
fn mgf_examples() {
    let r = mgf_check(1.0, 0.0, 10, 0).unwrap();
    assert_eq!(r.empirical, std::f64::consts::E);
    assert_eq!(r.analytic, std::f64::consts::E);
    let r = mgf_check(0.3, 0.5, 1_000_000, 17).unwrap();
    assert!(r.holds(), "{r:?}");
    assert!(mgf_check(0.0, -1.0, 10, 0).is_err());
}

#[test]
fn augmentation_preserves_mean_and_scales_covariance() {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Array2::from_shape_simple_fn((d, d), || rng.random_range(-1.0..1.0));
    let cov = a.dot(&a.t());
    let lambda = 0.6;
    let center = ndarray::array![0.5, -1.0, 2.0];
    let aug = GaussianAugmenter::new(&cov, lambda).unwrap();
    let n = 200_000;
    let x = aug.sample(center.view(), n, &mut rng);
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    for j in 0..d {
        let se = (lambda * cov[[j, j]] / n as f64).sqrt();
        assert!((mean[j] - center[j]).abs() <= 3.5 * se);
    }
    let c = &x - &mean;
    let emp = c.t().dot(&c) / n as f64;
    for i in 0..d {
        for j in 0..d {
            let target = lambda * cov[[i, j]];
            let var = lambda * lambda * (cov[[i, i]] * cov[[j, j]] + cov[[i, j]].powi(2));
            assert!((emp[[i, j]] - target).abs() <= 3.5 * (var / n as f64).sqrt());
        }
    }
}

#[test]
fn rank_deficient_covariance_keeps_draws_in_its_span() {
    let cov = ndarray::array![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
    let aug = GaussianAugmenter::new(&cov, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = aug.sample(ndarray::array![0.0, 0.0, 0.0].view(), 1000, &mut rng);
    for row in x.outer_iter() {
        // only the factorization jitter leaks out of the span
        assert!((row[0] - row[1]).abs() < 1e-3, "{row}");
        assert!(row[2].abs() < 1e-3);
    }
}
