//! Proxy fixed-point residual and min-norm query selection.
//!
//! With affine proxies the residual is `r(x) = ‖C x − e‖²`, where `C = I − L`
//! holds the slope blocks and `e` the stacked biases. All minimizers of `r`
//! over the feasible set share the same image `C x`, so the minimizer set is
//! `{x feasible : C x = w*}` and its min-norm element is found by a second QP
//! restricted to a thin band around `w*`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::GameInstance;
use crate::learner::ProxyParams;
use crate::linalg::{dist2, dot, Cholesky, Matrix};
use crate::qp::{max_violation, solve_qp_with, QpError, QpSettings, QpStatus, QuadProgram};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{stage} solve ended with status {status:?}")]
    Solver { stage: &'static str, status: QpStatus },
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMethod {
    /// Residual minimization, then min-norm over the minimizer set.
    TwoStage,
    /// Single solve of `r(x) + ridge ‖x‖²`.
    Ridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuerySelectorConfig<T> {
    pub slack_eps: T,
    pub qp_tol: T,
    pub tie_break_ridge: T,
    pub method: QueryMethod,
    pub max_iter: usize,
}

impl<T: Scalar> Default for QuerySelectorConfig<T> {
    fn default() -> Self {
        Self {
            slack_eps: T::lit(1e-7),
            qp_tol: T::lit(1e-8),
            tie_break_ridge: T::lit(1e-8),
            method: QueryMethod::TwoStage,
            max_iter: crate::qp::DEFAULT_MAX_ITER,
        }
    }
}

impl<T: Scalar> QuerySelectorConfig<T> {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.slack_eps > T::zero()) {
            return Err("slack_eps must be > 0".into());
        }
        if !(self.qp_tol > T::zero()) {
            return Err("qp_tol must be > 0".into());
        }
        if !(self.tie_break_ridge >= T::zero()) {
            return Err("tie_break_ridge must be >= 0".into());
        }
        if self.max_iter == 0 {
            return Err("max_iter must be >= 1".into());
        }
        Ok(())
    }
}

/// Selected query and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome<T> {
    pub x_hat: Vec<T>,
    /// Stage-1 optimal residual `r*`.
    pub r_star: T,
    /// `r(x_hat)`.
    pub r_value: T,
    /// The residual is strictly convex, so the minimizer set is a point.
    pub singleton: bool,
    /// `‖x_hat − x_stage1‖`.
    pub stage_gap: T,
    /// The band solve failed and the stage-1 point was returned.
    pub fallback: bool,
    pub iterations: usize,
}

/// Affine map `x ↦ C x − e` whose squared norm is the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap<T> {
    pub c: Matrix<T>,
    pub e: Vec<T>,
}

impl<T: Scalar> ResidualMap<T> {
    pub fn new(g: &GameInstance<T>, theta: &[ProxyParams<T>]) -> Result<Self, QueryError> {
        check_theta(g, theta)?;
        let (n, t_len) = (g.n_agents(), g.horizon());
        let dim = g.dim();
        let mut c = Matrix::identity(dim);
        let mut e = vec![T::zero(); dim];
        for (i, pp) in theta.iter().enumerate() {
            let bias_col = pp.n_in();
            for a in 0..t_len {
                let row = i * t_len + a;
                let lam = pp.lambda.row(a);
                e[row] = lam[bias_col];
                let c_row = c.row_mut(row);
                for slot in 0..n - 1 {
                    let j = if slot < i { slot } else { slot + 1 };
                    for s in 0..t_len {
                        c_row[j * t_len + s] = -lam[slot * t_len + s];
                    }
                }
            }
        }
        Ok(Self { c, e })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut w = self.c.mul_vec(x);
        for (wv, &ev) in w.iter_mut().zip(&self.e) {
            *wv -= ev;
        }
        w
    }

    pub fn value(&self, x: &[T]) -> T {
        let w = self.apply(x);
        dot(&w, &w)
    }

    /// `(2 CᵀC, −2 Cᵀe)`, so that `r(x) = ½ xᵀHx + gᵀx + ‖e‖²`.
    pub fn quadratic(&self) -> (Matrix<T>, Vec<T>) {
        let ones = vec![T::lit(2.0); self.c.rows()];
        let h = self.c.weighted_gram(&ones);
        let mut g = self.c.tr_mul_vec(&self.e);
        g.iter_mut().for_each(|v| *v *= T::lit(-2.0));
        (h, g)
    }
}

fn check_theta<T: Scalar>(g: &GameInstance<T>, theta: &[ProxyParams<T>]) -> Result<(), QueryError> {
    if theta.len() != g.n_agents() {
        return Err(QueryError::DimensionMismatch(format!(
            "{} proxies for {} agents",
            theta.len(),
            g.n_agents()
        )));
    }
    for (i, pp) in theta.iter().enumerate() {
        if pp.n_out() != g.horizon() || pp.n_in() != g.dim_minus() {
            return Err(QueryError::DimensionMismatch(format!(
                "proxy {i} has shape {}x{}, expected {}x{}",
                pp.n_out(),
                pp.n_in() + 1,
                g.horizon(),
                g.dim_minus() + 1
            )));
        }
    }
    Ok(())
}

/// `Σ_i ‖x_i − f̂_i(x_{-i})‖²`.
pub fn residual<T: Scalar>(g: &GameInstance<T>, theta: &[ProxyParams<T>], x: &[T]) -> Result<T, QueryError> {
    check_theta(g, theta)?;
    if x.len() != g.dim() {
        return Err(QueryError::DimensionMismatch(format!(
            "profile has length {}, expected {}",
            x.len(),
            g.dim()
        )));
    }
    let mut total = T::zero();
    for (i, pp) in theta.iter().enumerate() {
        let pred = pp.eval(&g.opponents(x, i)).map_err(|e| QueryError::DimensionMismatch(e.to_string()))?;
        for (&xv, &pv) in g.agent_slice(x, i).iter().zip(&pred) {
            total += (xv - pv) * (xv - pv);
        }
    }
    Ok(total)
}

/// Feasible minimizer of the residual with the smallest Euclidean norm.
pub fn select_query<T: Scalar>(
    g: &GameInstance<T>,
    theta: &[ProxyParams<T>],
    cfg: &QuerySelectorConfig<T>,
) -> Result<QueryOutcome<T>, QueryError> {
    select_query_from(g, theta, cfg, None)
}

/// [`select_query`] with an optional warm start for the first solve.
pub fn select_query_from<T: Scalar>(
    g: &GameInstance<T>,
    theta: &[ProxyParams<T>],
    cfg: &QuerySelectorConfig<T>,
    warm: Option<&[T]>,
) -> Result<QueryOutcome<T>, QueryError> {
    let map = ResidualMap::new(g, theta)?;
    let (mut h, mut q) = map.quadratic();
    let settings = QpSettings::new(cfg.qp_tol, cfg.max_iter);

    if cfg.method == QueryMethod::Ridge {
        let two_r = T::lit(2.0) * cfg.tie_break_ridge;
        h.add_diag(two_r);
        let sol = feasible_solve(g, h, q, &settings, warm, "ridge")?;
        let r = map.value(&sol.x);
        return Ok(QueryOutcome {
            r_star: r,
            r_value: r,
            singleton: false,
            stage_gap: T::zero(),
            fallback: false,
            iterations: sol.iterations,
            x_hat: sol.x,
        });
    }

    let singleton = strictly_convex(&h);
    let first = feasible_solve(g, h.clone(), q.clone(), &settings, warm, "residual")?;
    let r_star = map.value(&first.x);
    let mut iterations = first.iterations;
    if singleton {
        return Ok(QueryOutcome {
            r_star,
            r_value: r_star,
            singleton,
            stage_gap: T::zero(),
            fallback: false,
            iterations,
            x_hat: first.x,
        });
    }

    // stage 2: min ½‖x‖² over the feasible set intersected with a box band
    // around w* = C x₁, shrunk until the residual slack holds
    let budget = cfg.slack_eps * (T::one() + r_star.abs());
    let w_star = map.apply(&first.x);
    let l1: T = w_star.iter().map(|v| v.abs()).sum();
    let dim = T::lit(g.dim() as f64);
    // largest δ with dim δ² + 2‖w*‖₁ δ ≤ budget
    let mut delta = budget / (l1 + (l1 * l1 + dim * budget).sqrt());
    h = Matrix::identity(g.dim());
    q.iter_mut().for_each(|v| *v = T::zero());
    let base = g.feasible_set_qp(h, q);
    for _ in 0..8 {
        let banded = with_band(&base, &map, &first.x, delta);
        match solve_qp_with(&banded, &settings, Some(&first.x)) {
            Ok(sol) => {
                iterations += sol.iterations;
                let r = map.value(&sol.x);
                let feasible = max_violation(&sol.x, &base) <= cfg.qp_tol;
                if sol.status == QpStatus::Optimal && feasible && r <= r_star + budget {
                    return Ok(QueryOutcome {
                        stage_gap: dist2(&sol.x, &first.x),
                        r_star,
                        r_value: r,
                        singleton,
                        fallback: false,
                        iterations,
                        x_hat: sol.x,
                    });
                }
            }
            Err(e) => return Err(e.into()),
        }
        delta *= T::lit(0.1);
    }
    log::warn!("min-norm band solve failed; keeping the residual minimizer");
    Ok(QueryOutcome {
        r_star,
        r_value: r_star,
        singleton,
        stage_gap: T::zero(),
        fallback: true,
        iterations,
        x_hat: first.x,
    })
}

/// `λ_min(H) > 1e-9 ‖H‖`, tested by a shifted Cholesky factorization.
fn strictly_convex<T: Scalar>(h: &Matrix<T>) -> bool {
    let mut shifted = h.clone();
    shifted.add_diag(-T::lit(1e-9) * h.max_abs() * T::lit(h.rows() as f64).sqrt());
    Cholesky::new(&shifted).is_some()
}

/// Append `|C x − C x₁| ≤ δ` as two inequality rows per component.
fn with_band<T: Scalar>(base: &QuadProgram<T>, map: &ResidualMap<T>, x1: &[T], delta: T) -> QuadProgram<T> {
    let m = base.dim();
    let rows = base.n_ineq() + 2 * m;
    let w = map.c.mul_vec(x1);
    let mut a = Matrix::zeros(rows, m);
    let mut b = Vec::with_capacity(rows);
    for r in 0..base.n_ineq() {
        a.row_mut(r).copy_from_slice(base.a_ineq.row(r));
        b.push(base.b_ineq[r]);
    }
    for r in 0..m {
        let c_row = map.c.row(r);
        a.row_mut(base.n_ineq() + 2 * r).copy_from_slice(c_row);
        b.push(w[r] + delta);
        for (dst, &src) in a.row_mut(base.n_ineq() + 2 * r + 1).iter_mut().zip(c_row) {
            *dst = -src;
        }
        b.push(delta - w[r]);
    }
    QuadProgram {
        a_ineq: a,
        b_ineq: b,
        ..base.clone()
    }
}

/// Solve over the feasible set and insist on an optimal, feasible result;
/// a tighter re-solve is tried once if the first answer sits at the
/// tolerance edge.
fn feasible_solve<T: Scalar>(
    g: &GameInstance<T>,
    h: Matrix<T>,
    q: Vec<T>,
    settings: &QpSettings<T>,
    warm: Option<&[T]>,
    stage: &'static str,
) -> Result<crate::qp::QpSolution<T>, QueryError> {
    let p = g.feasible_set_qp(h, q);
    let sol = solve_qp_with(&p, settings, warm)?;
    if sol.status == QpStatus::Optimal && max_violation(&sol.x, &p) <= settings.tol {
        return Ok(sol);
    }
    let tight = QpSettings::new(settings.tol * T::lit(1e-2), settings.max_iter * 2);
    let retry = solve_qp_with(&p, &tight, Some(&sol.x))?;
    if retry.status == QpStatus::Optimal && max_violation(&retry.x, &p) <= settings.tol {
        return Ok(retry);
    }
    Err(QueryError::Solver {
        stage,
        status: retry.status,
    })
}
