mod common;

use common::Toy;
use gne_active::learner::{
    loss_grad, mse_loss, prox_sgd, prox_sgd_dense, proxy_eval, synth_samples, update_covariance, CovEstimate,
    InnerLoopConfig, LearnerState, ProxyParams, StepSchedule,
};
use gne_active::linalg::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_params<R: Rng>(rng: &mut R, n_out: usize, n_in: usize, spread: f64) -> ProxyParams<f64> {
    let rows: Vec<Vec<f64>> = (0..n_out)
        .map(|_| (0..=n_in).map(|_| rng.random_range(-spread..spread)).collect())
        .collect();
    ProxyParams {
        lambda: Matrix::from_rows(&rows),
        lo: -10.0,
        hi: 10.0,
    }
}

fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn proxy_eval_matches_row_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (n_out, n_in) = (rng.random_range(1..5), rng.random_range(0..6));
        let pp = random_params(&mut rng, n_out, n_in, 2.0);
        let x = random_vec(&mut rng, n_in);
        let y = proxy_eval(&pp, &x).unwrap();
        for r in 0..n_out {
            let mut s = pp.lambda[(r, n_in)];
            for c in 0..n_in {
                s += pp.lambda[(r, c)] * x[c];
            }
            assert!((y[r] - s).abs() < 1e-14);
        }
    }
    let bias_only = ProxyParams::with_bias(3, &[0.1, -0.4], -10.0, 10.0);
    assert_eq!(proxy_eval(&bias_only, &[5.0, -2.0, 7.0]).unwrap(), vec![0.1, -0.4]);
    assert!(proxy_eval(&bias_only, &[1.0]).is_err());
}

#[test]
fn mse_examples() {
    assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
    assert_eq!(mse_loss(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = random_vec(&mut rng, 9);
    let p = random_vec(&mut rng, 9);
    let oracle: f64 = z.iter().zip(&p).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
    assert!((mse_loss(&z, &p).unwrap() - oracle).abs() < 1e-14);
    assert!(mse_loss(&z, &p[..3]).is_err());
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    for _ in 0..20 {
        let (n_out, n_in) = (rng.random_range(1..5), rng.random_range(1..6));
        let pp = random_params(&mut rng, n_out, n_in, 1.0);
        let x = random_vec(&mut rng, n_in);
        let z = random_vec(&mut rng, n_out);
        let g = loss_grad(&pp, &x, &z).unwrap();
        let loss = |p: &ProxyParams<f64>| mse_loss(&z, &proxy_eval(p, &x).unwrap()).unwrap();
        let mut err = 0.0;
        for r in 0..n_out {
            for c in 0..=n_in {
                let mut up = pp.clone();
                up.lambda[(r, c)] += h;
                let mut dn = pp.clone();
                dn.lambda[(r, c)] -= h;
                let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
                err += (fd - g[(r, c)]).powi(2);
            }
        }
        assert!(err.sqrt() <= 1e-5 * g.frobenius_norm());
    }
}

#[test]
fn gradient_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pp = random_params(&mut rng, 3, 4, 1.0);
    let x = random_vec(&mut rng, 4);
    let z = proxy_eval(&pp, &x).unwrap();
    assert_eq!(loss_grad(&pp, &x, &z).unwrap().frobenius_norm(), 0.0);
    let g = loss_grad(&pp, &[0.0; 4], &[1.0, 2.0, 3.0]).unwrap();
    for r in 0..3 {
        assert!((0..4).all(|c| g[(r, c)] == 0.0));
        assert!(g[(r, 4)] != 0.0);
    }
}

#[test]
fn inner_loop_reaches_ridge_solution() {
    let toy = Toy::new(9);
    let gamma0 = 1.5 / toy.lipschitz();
    let e50 = toy.error(&toy.anchor, gamma0, 50);
    let e2000 = toy.error(&toy.anchor, gamma0, 2000);
    assert!(e2000 <= 1e-3, "{e2000:e}");
    assert!(e2000 < e50);
    let mut prev = f64::INFINITY;
    for iters in [10, 50, 200, 1000, 2000] {
        let e = toy.error(&toy.anchor, gamma0, iters);
        assert!(e < prev);
        prev = e;
    }
}

#[test]
fn contraction_against_ridge_oracle() {
    let toy = Toy::new(10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gamma0 = 1.5 / toy.lipschitz();
    let cfg = toy.cfg(gamma0);
    let s = toy.x * toy.x + 1.0;
    // single query: Gram x̃ x̃ᵀ has λ_min = 0, so the bound is 1 overall and
    // μ / (μ + ‖x̃‖²) along the data direction
    let along = toy.mu / (toy.mu + s);
    for _ in 0..20 {
        let a = random_params(&mut rng, 1, 1, 2.0);
        let mut b = random_params(&mut rng, 1, 1, 2.0);
        let ta = prox_sgd(&a, &toy.samples, &[toy.x], &cfg, 2000).unwrap();
        let tb = prox_sgd(&b, &toy.samples, &[toy.x], &cfg, 2000).unwrap();
        let ratio = common::dist(ta.theta(), tb.theta()) / common::dist(a.theta(), b.theta());
        assert!(ratio <= 1.0 + 1e-9);
        let shift = rng.random_range(0.1..1.0);
        b = a.clone();
        b.lambda[(0, 0)] += shift * toy.x;
        b.lambda[(0, 1)] += shift;
        let ta = prox_sgd(&a, &toy.samples, &[toy.x], &cfg, 2000).unwrap();
        let tb = prox_sgd(&b, &toy.samples, &[toy.x], &cfg, 2000).unwrap();
        let ratio = common::dist(ta.theta(), tb.theta()) / common::dist(a.theta(), b.theta());
        assert!(ratio <= along + 1e-4 && along < 1.0, "{ratio} vs {along}");
    }
}

#[test]
fn samples_at_prediction_leave_anchor_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pp = random_params(&mut rng, 4, 6, 1.0);
    let x = random_vec(&mut rng, 6);
    let z = proxy_eval(&pp, &x).unwrap();
    let cfg = InnerLoopConfig::default();
    let out = prox_sgd(&pp, &vec![z; 5], &x, &cfg, 300).unwrap();
    assert_eq!(out, pp);
}

#[test]
fn covariance_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 4;
    let mut state = LearnerState::new(vec![ProxyParams::zeros(n, 3, -10.0, 10.0)], 1e-4);
    let residuals: Vec<Vec<f64>> = (0..50).map(|_| random_vec(&mut rng, n)).collect();
    let mut cov = None;
    for e in &residuals {
        cov = Some(update_covariance(&mut state, 0, e).unwrap());
    }
    let cov = cov.unwrap();
    assert_eq!(cov.count, 50);
    assert_eq!(state.agents[0].residuals.len(), 50);
    for r in 0..n {
        for c in 0..n {
            let direct = residuals.iter().map(|e| e[r] * e[c]).sum::<f64>() / 50.0;
            assert!((cov.r_hat[(r, c)] - direct).abs() <= 1e-12);
            let vv: f64 = (0..n).map(|k| cov.v[(r, k)] * cov.v[(c, k)]).sum();
            assert!((vv - cov.r_hat[(r, c)]).abs() <= 1e-8);
        }
    }
}

#[test]
fn covariance_edge_cases() {
    let mut state = LearnerState::<f64>::new(vec![ProxyParams::zeros(3, 2, -10.0, 10.0)], 1e-4);
    let cov = update_covariance(&mut state, 0, &[0.0; 3]).unwrap();
    assert_eq!(cov.r_hat.frobenius_norm(), 0.0);
    assert_eq!(cov.v.frobenius_norm(), 0.0);
    let mut state = LearnerState::<f64>::new(vec![ProxyParams::zeros(3, 2, -10.0, 10.0)], 1e-4);
    let e = [0.5, -1.0, 2.0];
    let cov = update_covariance(&mut state, 0, &e).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            assert!((cov.r_hat[(r, c)] - e[r] * e[c]).abs() < 1e-15);
            let vv: f64 = (0..3).map(|k| cov.v[(r, k)] * cov.v[(c, k)]).sum();
            assert!((vv - e[r] * e[c]).abs() < 1e-8);
        }
    }
}

#[test]
fn synthetic_samples_reproduce_covariance() {
    let r_hat = Matrix::from_rows(&[vec![0.1, 0.03, 0.0], vec![0.03, 0.05, -0.01], vec![0.0, -0.01, 0.02]]);
    let cov = CovEstimate::from_second_moment(r_hat.clone(), 7);
    let anchor = [0.3, -0.2, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let draws = synth_samples(&cov, &anchor, 100_000, &mut rng).unwrap();
    let mut emp = [[0.0; 3]; 3];
    for z in &draws {
        for r in 0..3 {
            for c in 0..3 {
                emp[r][c] += (z[r] - anchor[r]) * (z[c] - anchor[c]);
            }
        }
    }
    let (mut diff, mut base) = (0.0, 0.0);
    for r in 0..3 {
        for c in 0..3 {
            diff += (emp[r][c] / draws.len() as f64 - r_hat[(r, c)]).powi(2);
            base += r_hat[(r, c)].powi(2);
        }
    }
    assert!(diff.sqrt() <= 0.05 * base.sqrt());

    let again = synth_samples(&cov, &anchor, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(again, synth_samples(&cov, &anchor, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
    let zero = CovEstimate::from_second_moment(Matrix::zeros(3, 3), 1);
    for z in synth_samples(&zero, &anchor, 4, &mut rng).unwrap() {
        assert_eq!(z, anchor.to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn updates_stay_in_box_and_match_dense_steps(
        seed in any::<u64>(),
        n_out in 1usize..4,
        n_in in 0usize..5,
        iters in 1usize..60,
        mu in 0.1f64..50.0,
        scale in 0.1f64..100.0,
        lipschitz_step in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut anchor = random_params(&mut rng, n_out, n_in, 12.0);
        anchor.clamp();
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect();
        let samples: Vec<Vec<f64>> = (0..3).map(|_| (0..n_out).map(|_| rng.random_range(-scale..scale)).collect()).collect();
        let step = if lipschitz_step { StepSchedule::InverseLipschitz } else { StepSchedule::Harmonic { gamma0: rng.random_range(1e-3..0.5) } };
        let cfg = InnerLoopConfig { mu, step, ..InnerLoopConfig::default() };
        let fast = prox_sgd(&anchor, &samples, &x, &cfg, iters).unwrap();
        let dense = prox_sgd_dense(&anchor, &samples, &x, &cfg, iters).unwrap();
        prop_assert!(fast.in_box());
        prop_assert!(dense.in_box());
        prop_assert!(common::dist(fast.theta(), dense.theta()) <= 1e-9 * (1.0 + fast.norm()));
    }
}
