#![allow(dead_code)]

use gne_active::game::{AgentSpec, CouplingSpec, GameInstance};
use gne_active::learner::{prox_sgd, InnerBudget, InnerLoopConfig, ProxyParams, StepSchedule};
use gne_active::linalg::Matrix;
use gne_active::qp::QuadProgram;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Dense Gaussian elimination with partial pivoting; `None` if singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Small EV-type game with per-agent (q, c, rho) and shared coupling.
pub fn ev_game(
    agents: &[(f64, Vec<f64>, f64, f64)],
    a: f64,
    b: f64,
    d: Vec<f64>,
    cbar: f64,
) -> GameInstance<f64> {
    let t_len = d.len();
    let specs = agents
        .iter()
        .map(|(q, c, rho, xbar)| AgentSpec {
            q: vec![*q; t_len],
            c: c.clone(),
            rho: *rho,
            xbar: *xbar,
        })
        .collect();
    let coupling = CouplingSpec {
        a,
        b,
        d,
        cbar,
        n_agents: agents.len(),
        horizon: t_len,
        include_d_in_cap: false,
    };
    GameInstance::new(specs, coupling).expect("valid test game")
}

/// Random game with `n` agents and horizon `t_len` around the default EV ranges.
pub fn random_game<R: Rng>(rng: &mut R, n: usize, t_len: usize) -> GameInstance<f64> {
    let agents: Vec<_> = (0..n)
        .map(|_| {
            let q = rng.random_range(0.006..0.01);
            let c = (0..t_len).map(|_| rng.random_range(0.055..0.095)).collect();
            let rho = rng.random_range(0.0..0.4 * t_len as f64 * 0.25);
            (q, c, rho, 0.25)
        })
        .collect();
    let d = (0..t_len).map(|_| rng.random_range(0.0..0.1)).collect();
    ev_game(&agents, 0.8, 0.02, d, 0.2)
}

/// Exhaustive active-set enumeration: every variable free / at lb / at ub,
/// every inequality inactive / tight. Each pattern gives an
/// equality-constrained QP solved through its KKT system; the best feasible
/// candidate is the optimum of a strictly convex QP.
pub fn enumerate(p: &QuadProgram<f64>) -> Option<Vec<f64>> {
    let m = p.g.len();
    let rows = p.b_ineq.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(m as u32) {
        let mut fixed = Vec::new();
        let mut c = code;
        for j in 0..m {
            match c % 3 {
                1 => fixed.push((j, p.lb[j])),
                2 => fixed.push((j, p.ub[j])),
                _ => {}
            }
            c /= 3;
        }
        for mask in 0..(1usize << rows) {
            let active: Vec<usize> = (0..rows).filter(|r| mask >> r & 1 == 1).collect();
            let k = fixed.len() + active.len();
            let n = m + k;
            let mut a = vec![vec![0.0; n]; n];
            let mut b = vec![0.0; n];
            for i in 0..m {
                for j in 0..m {
                    a[i][j] = p.h[(i, j)];
                }
                b[i] = -p.g[i];
            }
            for (e, &(j, v)) in fixed.iter().enumerate() {
                a[m + e][j] = 1.0;
                a[j][m + e] = 1.0;
                b[m + e] = v;
            }
            for (e, &r) in active.iter().enumerate() {
                let row = m + fixed.len() + e;
                for j in 0..m {
                    a[row][j] = p.a_ineq[(r, j)];
                    a[j][row] = p.a_ineq[(r, j)];
                }
                b[row] = p.b_ineq[r];
            }
            let Some(sol) = gauss_solve(a, b) else { continue };
            let x = sol[..m].to_vec();
            let feasible = (0..m).all(|j| x[j] >= p.lb[j] - 1e-9 && x[j] <= p.ub[j] + 1e-9)
                && (0..rows).all(|r| (0..m).map(|j| p.a_ineq[(r, j)] * x[j]).sum::<f64>() <= p.b_ineq[r] + 1e-9);
            if feasible {
                let f = p.objective(&x);
                if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                    best = Some((f, x));
                }
            }
        }
    }
    best.map(|(_, x)| x)
}

pub fn random_qp<R: Rng>(rng: &mut R, m: usize, rows: usize) -> QuadProgram<f64> {
    // H = BᵀB + 0.1 I
    let b: Vec<Vec<f64>> = (0..m).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut h = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            h[(i, j)] = (0..m).map(|k| b[k][i] * b[k][j]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
        }
    }
    let g = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    // inequalities through an interior point of the unit box
    let x_in: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..0.8)).collect();
    let mut a = Matrix::zeros(rows, m);
    let mut rhs = Vec::new();
    for r in 0..rows {
        let mut s = 0.0;
        for j in 0..m {
            a[(r, j)] = rng.random_range(-1.0..1.0);
            s += a[(r, j)] * x_in[j];
        }
        rhs.push(s + rng.random_range(0.0..0.3));
    }
    QuadProgram {
        h,
        g,
        a_ineq: a,
        b_ineq: rhs,
        lb: vec![0.0; m],
        ub: vec![1.0; m],
    }
}

/// Scalar toy: one output, one opponent coordinate. The exact proximal point
/// solves `(x̃ x̃ᵀ + μ I) Λᵀ = x̃ z̄ + μ Λ^kᵀ`.
pub struct Toy {
    pub anchor: ProxyParams<f64>,
    pub samples: Vec<Vec<f64>>,
    pub x: f64,
    pub mu: f64,
}

impl Toy {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1f64.sqrt()).unwrap();
        let x = 0.5;
        let samples = (0..10).map(|_| vec![0.2 + 0.7 * x + noise.sample(&mut rng)]).collect();
        Self {
            anchor: ProxyParams {
                lambda: Matrix::from_rows(&[vec![-0.6, 1.1]]),
                lo: -10.0,
                hi: 10.0,
            },
            samples,
            x,
            mu: 10.0,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        self.mu + self.x * self.x + 1.0
    }

    pub fn exact(&self, anchor: &ProxyParams<f64>) -> Vec<f64> {
        let xt = [self.x, 1.0];
        let zbar = self.samples.iter().map(|z| z[0]).sum::<f64>() / self.samples.len() as f64;
        let a = (0..2)
            .map(|r| (0..2).map(|c| xt[r] * xt[c] + if r == c { self.mu } else { 0.0 }).collect())
            .collect();
        let b = (0..2).map(|r| xt[r] * zbar + self.mu * anchor.lambda[(0, r)]).collect();
        gauss_solve(a, b).unwrap()
    }

    pub fn cfg(&self, gamma0: f64) -> InnerLoopConfig<f64> {
        InnerLoopConfig {
            mu: self.mu,
            step: StepSchedule::Harmonic { gamma0 },
            budget: InnerBudget::Fixed { iters: 1 },
            ..InnerLoopConfig::default()
        }
    }

    pub fn error(&self, anchor: &ProxyParams<f64>, gamma0: f64, iters: usize) -> f64 {
        let out = prox_sgd(anchor, &self.samples, &[self.x], &self.cfg(gamma0), iters).unwrap();
        dist(out.theta(), &self.exact(anchor))
    }
}

