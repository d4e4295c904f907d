mod common;

use common::{numerical_gradient, random_batch, relative_error};
use eventrl_core::nn::backprop;
use eventrl_core::rng::stream;
use eventrl_core::trpo::{
    conjugate_gradient, fisher_vector_product, fit_baseline, kl_gradient, mean_kl, surrogate_gradient,
    surrogate_loss, trust_region_step, TrpoConfig,
};
use eventrl_core::{MlpParams, NetworkShape};
use proptest::prelude::*;
use rand::Rng;

fn shape() -> NetworkShape {
    NetworkShape::new(3, vec![5, 4], 4).unwrap()
}

#[test]
fn backprop_matches_finite_differences() {
    let mut rng = stream(11, &[]);
    let theta = MlpParams::init(shape(), &mut rng);
    let xs: Vec<Vec<f64>> = (0..17).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ws: Vec<Vec<f64>> = (0..17).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let loss = |p: &MlpParams| {
        xs.iter()
            .zip(&ws)
            .map(|(x, w)| p.forward(x).unwrap().iter().zip(w).map(|(o, wi)| o * wi).sum::<f64>())
            .sum::<f64>()
            / xs.len() as f64
    };
    let analytic = backprop(&theta, &xs, &ws).unwrap();
    let numeric = numerical_gradient(&theta, loss, 1e-5);
    assert!(relative_error(&analytic, &numeric) < 1e-6);
}

#[test]
fn surrogate_and_kl_gradients_match_finite_differences() {
    let mut rng = stream(12, &[]);
    let old = MlpParams::init(shape(), &mut rng);
    let batch = random_batch(&mut rng, &shape(), &old, 40);
    let dir: Vec<f64> = (0..old.len()).map(|_| rng.random_range(-0.3..0.3)).collect();
    let theta = old.offset(&dir, 1.0);

    let g = surrogate_gradient(&theta, &batch).unwrap();
    let g_fd = numerical_gradient(&theta, |p| surrogate_loss(p, &batch).unwrap(), 1e-5);
    assert!(relative_error(&g, &g_fd) < 1e-4);

    let k = kl_gradient(&theta, &batch).unwrap();
    let k_fd = numerical_gradient(&theta, |p| mean_kl(p, &batch).unwrap(), 1e-5);
    assert!(relative_error(&k, &k_fd) < 1e-4);
}

#[test]
fn fisher_product_matches_differenced_kl_gradient() {
    let mut rng = stream(13, &[]);
    let old = MlpParams::init(shape(), &mut rng);
    let batch = random_batch(&mut rng, &shape(), &old, 40);
    let v: Vec<f64> = (0..old.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let hv = fisher_vector_product(&old, &batch, &v, 0.0).unwrap();
    let eps = 1e-5;
    let plus = kl_gradient(&old.offset(&v, eps), &batch).unwrap();
    let minus = kl_gradient(&old.offset(&v, -eps), &batch).unwrap();
    let fd: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    assert!(relative_error(&hv, &fd) < 1e-3);

    let damped = fisher_vector_product(&old, &batch, &v, 0.1).unwrap();
    for ((d, h), vi) in damped.iter().zip(&hv).zip(&v) {
        assert!((d - h - 0.1 * vi).abs() < 1e-12);
    }
}

#[test]
fn conjugate_gradient_solves_spd_systems() {
    let mut rng = stream(14, &[]);
    let n = 6;
    let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    // A = B^T B + I
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| b[k][i] * b[k][j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let x_true: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
    let g: Vec<f64> = a.iter().map(|row| row.iter().zip(&x_true).map(|(r, x)| r * x).sum()).collect();
    let op = |v: &[f64]| Ok(a.iter().map(|row| row.iter().zip(v).map(|(r, x)| r * x).sum()).collect());
    let sol = conjugate_gradient(op, &g, n).unwrap();
    for (x, t) in sol.x.iter().zip(&x_true) {
        assert!((x - t).abs() < 1e-8);
    }
    assert!(sol.residual_norm < 1e-8);
}

#[test]
fn baseline_fit_reduces_error_on_linear_targets() {
    let mut rng = stream(15, &[]);
    let xs: Vec<Vec<f64>> = (0..400).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0] - x[1] + 0.5 * x[2] + 3.0).collect();
    let phi = MlpParams::init(NetworkShape::new(3, vec![8], 1).unwrap(), &mut rng);
    let cfg = TrpoConfig {
        baseline_epochs: 100,
        ..Default::default()
    };
    let (_, report) = fit_baseline(&phi, &xs, &ys, &cfg, &mut rng).unwrap();
    assert!(!report.reverted);
    assert!(report.mse_after <= 0.5 * report.mse_before, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn accepted_steps_respect_the_trust_region(seed in any::<u64>(), n in 8usize..80) {
        let mut rng = stream(seed, &[]);
        let old = MlpParams::init(shape(), &mut rng);
        let batch = random_batch(&mut rng, &shape(), &old, n);
        let cfg = TrpoConfig::default();
        let (theta, report) = trust_region_step(&old, &batch, &cfg).unwrap();
        let kl = mean_kl(&theta, &batch).unwrap();
        if report.step_fraction > 0.0 {
            prop_assert!(kl <= 1.2 * cfg.max_kl);
            prop_assert!(surrogate_loss(&theta, &batch).unwrap() > surrogate_loss(&old, &batch).unwrap());
        } else {
            prop_assert_eq!(theta, old);
            prop_assert_eq!(kl, 0.0);
        }
    }

    #[test]
    fn fisher_product_is_symmetric(seed in any::<u64>()) {
        let mut rng = stream(seed, &[7]);
        let old = MlpParams::init(shape(), &mut rng);
        let batch = random_batch(&mut rng, &shape(), &old, 20);
        let u: Vec<f64> = (0..old.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..old.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hu = fisher_vector_product(&old, &batch, &u, 0.1).unwrap();
        let hv = fisher_vector_product(&old, &batch, &v, 0.1).unwrap();
        let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
        let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
        prop_assert!((vhu - uhv).abs() < 1e-10 * (1.0 + vhu.abs()));
        let uhu: f64 = u.iter().zip(&hu).map(|(a, b)| a * b).sum();
        prop_assert!(uhu > 0.0);
    }
}
