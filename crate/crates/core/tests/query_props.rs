mod common;

use common::{ev_game, random_game};
use gne_active::game::GameInstance;
use gne_active::learner::{proxy_eval, ProxyParams};
use gne_active::linalg::Matrix;
use gne_active::qp::{check_feasible, solve_qp, QpStatus};
use gne_active::query::{residual, select_query, QueryMethod, QuerySelectorConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_proxies<R: Rng>(rng: &mut R, g: &GameInstance<f64>, slope: f64) -> Vec<ProxyParams<f64>> {
    let (t, m) = (g.horizon(), g.dim_minus());
    (0..g.n_agents())
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|_| {
                    let mut r: Vec<f64> = (0..m).map(|_| rng.random_range(-slope..slope)).collect();
                    r.push(rng.random_range(-0.2..0.4));
                    r
                })
                .collect();
            ProxyParams {
                lambda: Matrix::from_rows(&rows),
                lo: -10.0,
                hi: 10.0,
            }
        })
        .collect()
}

/// Projection of a random box point onto the feasible set.
fn random_feasible<R: Rng>(rng: &mut R, g: &GameInstance<f64>) -> Vec<f64> {
    let y: Vec<f64> = (0..g.dim()).map(|_| rng.random_range(-0.1..0.35)).collect();
    let mut p = g.feasible_set();
    p.h = Matrix::identity(g.dim());
    p.g = y.iter().map(|v| -v).collect();
    let s = solve_qp(&p, 1e-10, 50_000).unwrap();
    assert_eq!(s.status, QpStatus::Optimal);
    s.x
}

fn sum_oracle(g: &GameInstance<f64>, theta: &[ProxyParams<f64>], x: &[f64]) -> f64 {
    let t = g.horizon();
    let mut total = 0.0;
    for (i, pp) in theta.iter().enumerate() {
        let others: Vec<f64> = x.iter().enumerate().filter(|(p, _)| p / t != i).map(|(_, v)| *v).collect();
        for r in 0..t {
            let mut pred = pp.lambda[(r, others.len())];
            for (c, o) in others.iter().enumerate() {
                pred += pp.lambda[(r, c)] * o;
            }
            total += (x[i * t + r] - pred).powi(2);
        }
    }
    total
}

#[test]
fn residual_examples() {
    let g = ev_game(&[(0.008, vec![0.07, 0.07], 0.0, 1.0)], 0.8, 0.02, vec![0.0, 0.0], 2.0);
    let zero = ProxyParams::zeros(2, 0, -10.0, 10.0);
    assert_eq!(residual(&g, &[zero], &[1.0, 1.0]).unwrap(), 2.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let g = random_game(&mut rng, 3, 2);
        let theta = random_proxies(&mut rng, &g, 1.0);
        let x: Vec<f64> = (0..g.dim()).map(|_| rng.random_range(0.0..0.25)).collect();
        let r = residual(&g, &theta, &x).unwrap();
        assert!((r - sum_oracle(&g, &theta, &x)).abs() <= 1e-13 * (1.0 + r));
    }
}

#[test]
fn zero_residual_means_proxy_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let g = random_game(&mut rng, 3, 3);
        let x = random_feasible(&mut rng, &g);
        let mut theta = random_proxies(&mut rng, &g, 0.5);
        // shift the biases so that x is a fixed point of every proxy
        for (i, pp) in theta.iter_mut().enumerate() {
            let pred = proxy_eval(pp, &g.opponents(&x, i)).unwrap();
            let nb = pp.n_in();
            for (r, (&xv, &pv)) in g.agent_slice(&x, i).iter().zip(&pred).enumerate() {
                pp.lambda[(r, nb)] += xv - pv;
            }
        }
        let r = residual(&g, &theta, &x).unwrap();
        assert!(r <= 1e-24);
        for (i, pp) in theta.iter().enumerate() {
            let pred = proxy_eval(pp, &g.opponents(&x, i)).unwrap();
            assert!(common::dist(&pred, g.agent_slice(&x, i)) <= r.sqrt() + 1e-12);
        }
        let q = select_query(&g, &theta, &QuerySelectorConfig::default()).unwrap();
        assert!(q.r_star <= 1e-8);
        let rq = residual(&g, &theta, &q.x_hat).unwrap();
        for (i, pp) in theta.iter().enumerate() {
            let pred = proxy_eval(pp, &g.opponents(&q.x_hat, i)).unwrap();
            assert!(common::dist(&pred, g.agent_slice(&q.x_hat, i)) <= rq.sqrt() + 1e-6);
        }
    }
}

#[test]
fn min_norm_over_a_segment_of_minimizers() {
    // f̂₁(x₂) = x₂, f̂₂(x₁) = x₁: every feasible point with x₁ = x₂ is a minimizer
    let spec = (0.008, vec![0.07, 0.07], 0.3, 0.25);
    let g = ev_game(&[spec.clone(), spec], 0.8, 0.02, vec![0.0, 0.0], 0.2);
    let mirror = || ProxyParams {
        lambda: Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]),
        lo: -10.0,
        hi: 10.0,
    };
    let theta = vec![mirror(), mirror()];
    let cfg = QuerySelectorConfig::default();
    let q = select_query(&g, &theta, &cfg).unwrap();
    assert!(q.r_star <= 1e-8);
    // smallest point on the diagonal meeting the charge floor
    assert!(common::dist(&q.x_hat, &[0.15; 4]) <= 1e-4);
    let slack = q.r_star + cfg.slack_eps * (1.0 + q.r_star);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tried = 0;
    while tried < 100 {
        let u = [rng.random_range(0.0..0.25), rng.random_range(0.0..0.25)];
        let y = [u[0], u[1], u[0], u[1]];
        if !check_feasible(&y, &g.feasible_set(), 0.0).unwrap() {
            continue;
        }
        tried += 1;
        assert!(residual(&g, &theta, &y).unwrap() <= slack);
        assert!(common::norm(&q.x_hat) <= common::norm(&y) + 1e-4);
    }
}

#[test]
fn singleton_stage_two_agrees_with_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_game(&mut rng, 3, 2);
    let theta = random_proxies(&mut rng, &g, 0.3);
    let two = select_query(&g, &theta, &QuerySelectorConfig::default()).unwrap();
    let ridge = select_query(
        &g,
        &theta,
        &QuerySelectorConfig {
            method: QueryMethod::Ridge,
            ..QuerySelectorConfig::default()
        },
    )
    .unwrap();
    assert!(two.singleton);
    assert!(common::dist(&two.x_hat, &ridge.x_hat) <= 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn query_is_feasible_and_optimal(seed in any::<u64>(), n in 1usize..4, t in 1usize..4, slope in 0.0f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_game(&mut rng, n, t);
        let theta = random_proxies(&mut rng, &g, slope);
        let cfg = QuerySelectorConfig::default();
        let q = select_query(&g, &theta, &cfg).unwrap();
        prop_assert!(check_feasible(&q.x_hat, &g.feasible_set(), cfg.qp_tol).unwrap());
        let r = residual(&g, &theta, &q.x_hat).unwrap();
        prop_assert!((r - q.r_value).abs() <= 1e-12 * (1.0 + r));
        prop_assert!(r <= q.r_star + cfg.slack_eps * (1.0 + q.r_star));
        for _ in 0..30 {
            let y = random_feasible(&mut rng, &g);
            prop_assert!(residual(&g, &theta, &y).unwrap() >= q.r_star - 10.0 * cfg.qp_tol);
        }
    }
}
