//! Convex quadratic programs
//!
//! ```text
//! minimize    ½ xᵀ H x + gᵀ x
//! subject to  A_ineq x ≤ b_ineq
//!             lb ≤ x ≤ ub
//! ```
//!
//! solved with an operator-splitting (ADMM) iteration followed by an
//! active-set polishing step. The polish solves the equality-constrained KKT
//! system on the guessed active set and is accepted only when the resulting
//! primal/dual pair passes the KKT check at the requested tolerance, so a
//! reported `Optimal` status is a certificate, not a heuristic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm_inf, Cholesky, Lu, Matrix};
use crate::scalar::Scalar;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Hessian is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive semidefinite")]
    NotPsd,
    #[error("box bounds inverted at index {0}")]
    BoundsInverted(usize),
    #[error("tolerance must be positive")]
    BadTolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadProgram<T> {
    pub h: Matrix<T>,
    pub g: Vec<T>,
    /// Rows encode `a·x ≤ b`.
    pub a_ineq: Matrix<T>,
    pub b_ineq: Vec<T>,
    pub lb: Vec<T>,
    pub ub: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    pub objective: T,
    pub kkt_residual: T,
    pub status: QpStatus,
    pub iterations: usize,
    /// Multipliers of the box rows (positive at the upper bound).
    pub y_box: Vec<T>,
    /// Multipliers of the inequality rows (nonnegative at optimality).
    pub y_ineq: Vec<T>,
}

impl<T: Scalar> QpSolution<T> {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone)]
pub struct QpSettings<T> {
    pub tol: T,
    pub max_iter: usize,
    pub rho: T,
    pub sigma: T,
    pub alpha: T,
    pub check_every: usize,
    pub adapt_rho_every: usize,
    /// Iterations without primal progress before declaring infeasibility.
    pub stall_window: usize,
    /// Ridge used only inside the polishing KKT solve.
    pub ridge: T,
}

impl<T: Scalar> QpSettings<T> {
    pub fn new(tol: T, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            rho: T::lit(0.1),
            sigma: T::lit(1e-6),
            alpha: T::lit(1.6),
            check_every: 25,
            adapt_rho_every: 100,
            stall_window: 500,
            ridge: T::lit(1e-10),
        }
    }
}

impl<T: Scalar> Default for QpSettings<T> {
    fn default() -> Self {
        Self::new(T::lit(DEFAULT_TOL), DEFAULT_MAX_ITER)
    }
}

impl<T: Scalar> QuadProgram<T> {
    /// Problem with only box constraints (possibly infinite).
    pub fn boxed(h: Matrix<T>, g: Vec<T>, lb: Vec<T>, ub: Vec<T>) -> Self {
        let m = g.len();
        Self {
            h,
            g,
            a_ineq: Matrix::zeros(0, m),
            b_ineq: Vec::new(),
            lb,
            ub,
        }
    }

    pub fn unconstrained(h: Matrix<T>, g: Vec<T>) -> Self {
        let m = g.len();
        Self::boxed(
            h,
            g,
            vec![T::neg_infinity(); m],
            vec![T::infinity(); m],
        )
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.b_ineq.len()
    }

    pub fn objective(&self, x: &[T]) -> T {
        let hx = self.h.mul_vec(x);
        T::lit(0.5) * dot(x, &hx) + dot(&self.g, x)
    }

    /// Dimensions, symmetry, PSD-ness and bound ordering.
    pub fn validate(&self) -> Result<(), QpError> {
        let m = self.dim();
        if self.h.rows() != m || self.h.cols() != m {
            return Err(QpError::DimensionMismatch(format!(
                "H is {}x{}, g has length {m}",
                self.h.rows(),
                self.h.cols()
            )));
        }
        if self.a_ineq.rows() != self.b_ineq.len() || (self.a_ineq.rows() > 0 && self.a_ineq.cols() != m) {
            return Err(QpError::DimensionMismatch(format!(
                "A_ineq is {}x{}, b_ineq has length {}",
                self.a_ineq.rows(),
                self.a_ineq.cols(),
                self.b_ineq.len()
            )));
        }
        if self.lb.len() != m || self.ub.len() != m {
            return Err(QpError::DimensionMismatch("box bounds".into()));
        }
        if let Some(i) = (0..m).find(|&i| !(self.lb[i] <= self.ub[i])) {
            return Err(QpError::BoundsInverted(i));
        }
        let hn = self.h.max_abs();
        let asym = self.h.asymmetry();
        if asym > T::lit(1e-12) * hn.max(T::one()) {
            return Err(QpError::NotSymmetric(asym.as_f64()));
        }
        if m > 0 && hn > T::zero() {
            let mut shifted = self.h.clone();
            shifted.add_diag(T::lit(1e-10) * hn * T::lit(1.000001) + T::min_positive_value());
            if Cholesky::new(&shifted).is_none() {
                return Err(QpError::NotPsd);
            }
        }
        Ok(())
    }
}

/// `true` iff every box and inequality constraint is violated by at most `tol`.
pub fn check_feasible<T: Scalar>(x: &[T], p: &QuadProgram<T>, tol: T) -> Result<bool, QpError> {
    if x.len() != p.dim() || p.lb.len() != p.dim() || p.ub.len() != p.dim() {
        return Err(QpError::DimensionMismatch(format!(
            "x has length {}, problem dimension {}",
            x.len(),
            p.dim()
        )));
    }
    if p.a_ineq.rows() != p.b_ineq.len() || (p.a_ineq.rows() > 0 && p.a_ineq.cols() != x.len()) {
        return Err(QpError::DimensionMismatch("inequality rows".into()));
    }
    Ok(max_violation(x, p) <= tol)
}

/// Largest constraint violation of `x`.
pub fn max_violation<T: Scalar>(x: &[T], p: &QuadProgram<T>) -> T {
    let mut v = T::zero();
    for i in 0..x.len() {
        v = v.max(p.lb[i] - x[i]).max(x[i] - p.ub[i]);
    }
    for r in 0..p.n_ineq() {
        v = v.max(dot(p.a_ineq.row(r), x) - p.b_ineq[r]);
    }
    if v.is_nan() {
        T::infinity()
    } else {
        v
    }
}

pub fn solve_qp<T: Scalar>(p: &QuadProgram<T>, tol: T, max_iter: usize) -> Result<QpSolution<T>, QpError> {
    solve_qp_with(p, &QpSettings::new(tol, max_iter), None)
}

/// Solve with explicit settings and an optional initial primal iterate.
pub fn solve_qp_with<T: Scalar>(
    p: &QuadProgram<T>,
    settings: &QpSettings<T>,
    x0: Option<&[T]>,
) -> Result<QpSolution<T>, QpError> {
    if !(settings.tol > T::zero()) {
        return Err(QpError::BadTolerance);
    }
    p.validate()?;
    if let Some(x0) = x0 {
        if x0.len() != p.dim() {
            return Err(QpError::DimensionMismatch("initial iterate".into()));
        }
    }
    Ok(Admm::new(p, settings).run(x0))
}

/// KKT residual of a primal/dual pair, with multipliers in the sign
/// convention `y > 0` at an upper bound, `y < 0` at a lower bound.
pub fn kkt_residual<T: Scalar>(p: &QuadProgram<T>, x: &[T], y_box: &[T], y_ineq: &[T]) -> T {
    let n = p.dim();
    let mut grad = p.h.mul_vec(x);
    for i in 0..n {
        grad[i] += p.g[i] + y_box[i];
    }
    for (r, &yr) in y_ineq.iter().enumerate() {
        if yr != T::zero() {
            crate::linalg::axpy(yr, p.a_ineq.row(r), &mut grad);
        }
    }
    let mut res = norm_inf(&grad);
    res = res.max(max_violation(x, p));
    let comp = |y: T, v: T, lo: T, hi: T| -> T {
        let mut c = T::zero();
        if y > T::zero() {
            c = c.max(if hi.is_finite() { y * (hi - v).abs() } else { y });
        } else if y < T::zero() {
            let ny = -y;
            c = c.max(if lo.is_finite() { ny * (v - lo).abs() } else { ny });
        }
        c
    };
    for i in 0..n {
        res = res.max(comp(y_box[i], x[i], p.lb[i], p.ub[i]));
    }
    for r in 0..p.n_ineq() {
        let v = dot(p.a_ineq.row(r), x);
        res = res.max(comp(y_ineq[r], v, T::neg_infinity(), p.b_ineq[r]));
    }
    if res.is_nan() {
        T::infinity()
    } else {
        res
    }
}

/// ADMM state over the stacked constraint matrix `[I; A_ineq]` with bounds
/// `[lb; -inf] ≤ · ≤ [ub; b_ineq]`. The identity block is never stored.
struct Admm<'a, T: Scalar> {
    p: &'a QuadProgram<T>,
    s: &'a QpSettings<T>,
    n: usize,
    m: usize,
    /// Per-row penalty (box rows first).
    rho: Vec<T>,
    chol: Cholesky<T>,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

impl<'a, T: Scalar> Admm<'a, T> {
    fn new(p: &'a QuadProgram<T>, s: &'a QpSettings<T>) -> Self {
        let n = p.dim();
        let m = p.n_ineq();
        let mut me = Self {
            p,
            s,
            n,
            m,
            rho: Vec::new(),
            chol: Cholesky::new(&Matrix::identity(1)).expect("identity"),
        };
        me.set_rho(s.rho);
        me
    }

    fn bounds(&self, j: usize) -> (T, T) {
        if j < self.n {
            (self.p.lb[j], self.p.ub[j])
        } else {
            (T::neg_infinity(), self.p.b_ineq[j - self.n])
        }
    }

    fn set_rho(&mut self, base: T) {
        let base = base.max(T::lit(RHO_MIN)).min(T::lit(RHO_MAX));
        self.rho = (0..self.n + self.m)
            .map(|j| {
                let (l, u) = self.bounds(j);
                if !l.is_finite() && !u.is_finite() {
                    T::lit(RHO_MIN)
                } else if l == u {
                    base * T::lit(RHO_EQ_SCALE)
                } else {
                    base
                }
            })
            .collect();
        // K = H + σI + diag(ρ_box) + Aᵀ diag(ρ_ineq) A
        let mut k = self.p.h.clone();
        for i in 0..self.n {
            k[(i, i)] += self.s.sigma + self.rho[i];
        }
        if self.m > 0 {
            let gram = self.p.a_ineq.weighted_gram(&self.rho[self.n..]);
            k.add_assign(&gram);
        }
        self.chol = match Cholesky::new(&k) {
            Some(c) => c,
            None => {
                let mut k2 = k;
                k2.add_diag(T::lit(1e-8) * k2.max_abs().max(T::one()));
                Cholesky::new(&k2).expect("regularized ADMM system must be positive definite")
            }
        };
    }

    fn a_mul(&self, x: &[T], out: &mut [T]) {
        out[..self.n].copy_from_slice(x);
        if self.m > 0 {
            self.p.a_ineq.mul_vec_into(x, &mut out[self.n..]);
        }
    }

    fn at_mul(&self, y: &[T], out: &mut [T]) {
        out.copy_from_slice(&y[..self.n]);
        for r in 0..self.m {
            let yr = y[self.n + r];
            if yr != T::zero() {
                crate::linalg::axpy(yr, self.p.a_ineq.row(r), out);
            }
        }
    }

    fn project(&self, j: usize, v: T) -> T {
        let (l, u) = self.bounds(j);
        v.max(l).min(u)
    }

    fn run(mut self, x0: Option<&[T]>) -> QpSolution<T> {
        let (n, mt) = (self.n, self.n + self.m);
        let tol = self.s.tol;
        let alpha = self.s.alpha;
        let sigma = self.s.sigma;

        let mut x = match x0 {
            Some(x0) => x0.to_vec(),
            None => vec![T::zero(); n],
        };
        let mut z = vec![T::zero(); mt];
        self.a_mul(&x, &mut z);
        for j in 0..mt {
            z[j] = self.project(j, z[j]);
        }
        let mut y = vec![T::zero(); mt];
        let mut y_prev = y.clone();

        let mut rhs = vec![T::zero(); n];
        let mut tmp_m = vec![T::zero(); mt];
        let mut xt = vec![T::zero(); n];
        let mut zt = vec![T::zero(); mt];
        let mut ax = vec![T::zero(); mt];
        let mut aty = vec![T::zero(); n];

        let mut best: Option<(T, Vec<T>, Vec<T>)> = None;
        let mut stall_best = T::infinity();
        let mut stall_window_best = T::infinity();
        let mut stall_anchor = 0usize;

        let mut iter = 0usize;
        while iter < self.s.max_iter {
            iter += 1;
            // x̃ = K⁻¹ (σx − g + Aᵀ(ρ∘z − y))
            for j in 0..mt {
                tmp_m[j] = self.rho[j] * z[j] - y[j];
            }
            self.at_mul(&tmp_m, &mut rhs);
            for i in 0..n {
                rhs[i] += sigma * x[i] - self.p.g[i];
            }
            xt.copy_from_slice(&rhs);
            self.chol.solve_in_place(&mut xt);
            self.a_mul(&xt, &mut zt);

            for i in 0..n {
                x[i] = alpha * xt[i] + (T::one() - alpha) * x[i];
            }
            for j in 0..mt {
                let relaxed = alpha * zt[j] + (T::one() - alpha) * z[j];
                let z_new = self.project(j, relaxed + y[j] / self.rho[j]);
                y[j] += self.rho[j] * (relaxed - z_new);
                z[j] = z_new;
            }

            let last = iter == self.s.max_iter;
            if iter % self.s.check_every != 0 && !last {
                continue;
            }

            self.a_mul(&x, &mut ax);
            self.at_mul(&y, &mut aty);
            let hx = self.p.h.mul_vec(&x);
            let mut r_prim = T::zero();
            for j in 0..mt {
                r_prim = r_prim.max((ax[j] - z[j]).abs());
            }
            let mut r_dual = T::zero();
            for i in 0..n {
                r_dual = r_dual.max((hx[i] + self.p.g[i] + aty[i]).abs());
            }
            let prim_scale = norm_inf(&ax).max(norm_inf(&z)).max(T::one());
            let dual_scale = norm_inf(&hx).max(norm_inf(&aty)).max(norm_inf(&self.p.g)).max(T::one());

            let (yb, yi) = y.split_at(n);
            let kkt = kkt_residual(self.p, &x, yb, yi);
            if best.as_ref().is_none_or(|(b, _, _)| kkt < *b) {
                best = Some((kkt, x.clone(), y.clone()));
            }
            if kkt <= tol {
                return self.finish(x, y, QpStatus::Optimal, iter);
            }

            let loose = T::lit(1e-3);
            if r_prim <= loose * prim_scale && r_dual <= loose * dual_scale || last {
                if let Some(sol) = self.polish(&z, &y, iter) {
                    return sol;
                }
            }

            if self.primal_infeasible(&y, &y_prev) {
                return self.finish(x, y, QpStatus::Infeasible, iter);
            }
            y_prev.copy_from_slice(&y);

            // stall rule: no decrease below tol·10³ within the window
            let threshold = tol * T::lit(1e3) * prim_scale;
            if r_prim <= threshold {
                stall_anchor = iter;
                stall_window_best = T::infinity();
            } else {
                stall_window_best = stall_window_best.min(r_prim);
                if iter - stall_anchor >= self.s.stall_window {
                    if stall_window_best >= T::lit(0.5) * stall_best {
                        return self.finish(x, y, QpStatus::Infeasible, iter);
                    }
                    stall_best = stall_best.min(stall_window_best);
                    stall_window_best = T::infinity();
                    stall_anchor = iter;
                }
            }

            if iter % self.s.adapt_rho_every == 0 {
                let ratio = ((r_prim / prim_scale) / (r_dual / dual_scale).max(T::lit(1e-30))).sqrt();
                let base = self.rho_base();
                let new = (base * ratio).max(T::lit(RHO_MIN)).min(T::lit(RHO_MAX));
                if new > base * T::lit(5.0) || new < base / T::lit(5.0) {
                    self.set_rho(new);
                }
            }
        }
        let (_, bx, by) = best.expect("at least one check");
        self.finish(bx, by, QpStatus::MaxIter, iter)
    }

    fn rho_base(&self) -> T {
        for j in 0..self.n + self.m {
            let (l, u) = self.bounds(j);
            if (l.is_finite() || u.is_finite()) && l != u {
                return self.rho[j];
            }
        }
        for j in 0..self.n + self.m {
            let (l, u) = self.bounds(j);
            if l == u {
                return self.rho[j] / T::lit(RHO_EQ_SCALE);
            }
        }
        self.s.rho
    }

    fn primal_infeasible(&self, y: &[T], y_prev: &[T]) -> bool {
        let mt = self.n + self.m;
        let dy: Vec<T> = (0..mt).map(|j| y[j] - y_prev[j]).collect();
        let dy_norm = norm_inf(&dy);
        if dy_norm <= T::lit(1e-10) {
            return false;
        }
        let eps = T::lit(1e-6);
        let mut at_dy = vec![T::zero(); self.n];
        self.at_mul(&dy, &mut at_dy);
        if norm_inf(&at_dy) > eps * dy_norm {
            return false;
        }
        let mut support = T::zero();
        for j in 0..mt {
            let (l, u) = self.bounds(j);
            let d = dy[j];
            if d > eps * dy_norm {
                if !u.is_finite() {
                    return false;
                }
                support += u * d;
            } else if d < -eps * dy_norm {
                if !l.is_finite() {
                    return false;
                }
                support += l * d;
            }
        }
        support < -eps * dy_norm
    }

    fn finish(&self, x: Vec<T>, y: Vec<T>, status: QpStatus, iterations: usize) -> QpSolution<T> {
        let (yb, yi) = y.split_at(self.n);
        let kkt = kkt_residual(self.p, &x, yb, yi);
        QpSolution {
            objective: self.p.objective(&x),
            kkt_residual: kkt,
            status,
            iterations,
            y_box: yb.to_vec(),
            y_ineq: yi.to_vec(),
            x,
        }
    }

    /// Solve the KKT system on the active set guessed from `(z, y)`.
    fn polish(&self, z: &[T], y: &[T], iter: usize) -> Option<QpSolution<T>> {
        let (n, m) = (self.n, self.m);
        // Active guess: lower when z - l < -y, upper when u - z < y.
        let side = |j: usize| -> i8 {
            let (l, u) = self.bounds(j);
            if l == u {
                return 2;
            }
            if u.is_finite() && u - z[j] < y[j] {
                1
            } else if l.is_finite() && z[j] - l < -y[j] {
                -1
            } else {
                0
            }
        };
        let mut fixed_val: Vec<Option<T>> = vec![None; n];
        for (i, fv) in fixed_val.iter_mut().enumerate() {
            *fv = match side(i) {
                1 | 2 => Some(self.p.ub[i]),
                -1 => Some(self.p.lb[i]),
                _ => None,
            };
        }
        let free: Vec<usize> = (0..n).filter(|&i| fixed_val[i].is_none()).collect();
        let act: Vec<usize> = (0..m).filter(|&r| side(n + r) != 0).collect();
        let nf = free.len();
        let na = act.len();
        let dim = nf + na;

        let mut x = vec![T::zero(); n];
        for i in 0..n {
            if let Some(v) = fixed_val[i] {
                x[i] = v;
            }
        }

        let mut y_ineq = vec![T::zero(); m];
        if dim > 0 {
            // [H_FF + δI  A_AFᵀ; A_AF  −δI] with iterative refinement
            let delta = self.s.ridge;
            let mut kkt = Matrix::zeros(dim, dim);
            let mut kkt_exact = Matrix::zeros(dim, dim);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    kkt[(a, b)] = self.p.h[(i, j)];
                    kkt_exact[(a, b)] = self.p.h[(i, j)];
                }
                kkt[(a, a)] += delta;
            }
            for (c, &r) in act.iter().enumerate() {
                let row = self.p.a_ineq.row(r);
                for (a, &i) in free.iter().enumerate() {
                    kkt[(nf + c, a)] = row[i];
                    kkt[(a, nf + c)] = row[i];
                    kkt_exact[(nf + c, a)] = row[i];
                    kkt_exact[(a, nf + c)] = row[i];
                }
                kkt[(nf + c, nf + c)] = -delta;
            }
            let mut b = vec![T::zero(); dim];
            for (a, &i) in free.iter().enumerate() {
                let mut s = -self.p.g[i];
                for j in 0..n {
                    if fixed_val[j].is_some() {
                        s -= self.p.h[(i, j)] * x[j];
                    }
                }
                b[a] = s;
            }
            for (c, &r) in act.iter().enumerate() {
                let row = self.p.a_ineq.row(r);
                let mut s = self.p.b_ineq[r];
                for j in 0..n {
                    if fixed_val[j].is_some() {
                        s -= row[j] * x[j];
                    }
                }
                b[nf + c] = s;
            }
            let lu = Lu::new(&kkt)?;
            let mut sol = lu.solve(&b);
            for _ in 0..5 {
                let ks = kkt_exact.mul_vec(&sol);
                let resid: Vec<T> = b.iter().zip(&ks).map(|(&bb, &kk)| bb - kk).collect();
                if norm_inf(&resid) <= T::epsilon() * norm_inf(&b).max(T::one()) {
                    break;
                }
                let corr = lu.solve(&resid);
                for (s, c) in sol.iter_mut().zip(&corr) {
                    *s += *c;
                }
            }
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            for (a, &i) in free.iter().enumerate() {
                x[i] = sol[a];
            }
            for (c, &r) in act.iter().enumerate() {
                y_ineq[r] = sol[nf + c];
            }
        }
        // Box multipliers from stationarity on fixed coordinates.
        let mut grad = self.p.h.mul_vec(&x);
        for i in 0..n {
            grad[i] += self.p.g[i];
        }
        for (r, &yr) in y_ineq.iter().enumerate() {
            if yr != T::zero() {
                crate::linalg::axpy(yr, self.p.a_ineq.row(r), &mut grad);
            }
        }
        let mut y_box = vec![T::zero(); n];
        for i in 0..n {
            if fixed_val[i].is_some() {
                y_box[i] = -grad[i];
            }
        }
        let kkt = kkt_residual(self.p, &x, &y_box, &y_ineq);
        if kkt <= self.s.tol {
            Some(QpSolution {
                objective: self.p.objective(&x),
                kkt_residual: kkt,
                status: QpStatus::Optimal,
                iterations: iter,
                y_box,
                y_ineq,
                x,
            })
        } else {
            let _ = y;
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: f64) -> Matrix<f64> {
        Matrix::from_rows(&[vec![v]])
    }

    #[test]
    fn one_dimensional_box_projection() {
        let p = QuadProgram::boxed(m1(2.0), vec![0.0], vec![1.0], vec![2.0]);
        let s = solve_qp(&p, 1e-8, 50_000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-8);
        assert!((s.objective - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unconstrained_newton_point() {
        let mut h = Matrix::<f64>::identity(2);
        h.scale(2.0);
        let p = QuadProgram::unconstrained(h, vec![-2.0, -4.0]);
        let s = solve_qp(&p, 1e-8, 50_000).unwrap();
        assert!(s.is_optimal());
        assert!((s.x[0] - 1.0).abs() < 1e-8 && (s.x[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn feasibility_check_boundaries() {
        let p = QuadProgram::boxed(m1(1.0), vec![0.0], vec![1.0], vec![2.0]);
        assert!(check_feasible(&[1.5], &p, 1e-8).unwrap());
        assert!(!check_feasible(&[2.1], &p, 1e-8).unwrap());
        assert!(check_feasible(&[2.0 + 5e-9], &p, 1e-8).unwrap());
        assert!(matches!(
            check_feasible(&[1.0, 2.0], &p, 1e-8),
            Err(QpError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn detects_infeasible_inequalities() {
        // x ≤ -1 and -x ≤ -1 (x ≥ 1)
        let p = QuadProgram {
            h: m1(1.0),
            g: vec![0.0],
            a_ineq: Matrix::from_rows(&[vec![1.0], vec![-1.0]]),
            b_ineq: vec![-1.0, -1.0],
            lb: vec![f64::NEG_INFINITY],
            ub: vec![f64::INFINITY],
        };
        let s = solve_qp(&p, 1e-8, 50_000).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_problems() {
        let p = QuadProgram::boxed(m1(1.0), vec![0.0], vec![2.0], vec![1.0]);
        assert_eq!(p.validate(), Err(QpError::BoundsInverted(0)));
        let p = QuadProgram::unconstrained(m1(-1.0), vec![0.0]);
        assert_eq!(p.validate(), Err(QpError::NotPsd));
        let h = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        let p = QuadProgram::unconstrained(h, vec![0.0, 0.0]);
        assert!(matches!(p.validate(), Err(QpError::NotSymmetric(_))));
        assert_eq!(solve_qp(&QuadProgram::unconstrained(m1(1.0), vec![0.0]), 0.0, 10), Err(QpError::BadTolerance));
    }

    #[test]
    fn singular_hessian_with_box() {
        // linear objective on a box: x = lower corner
        let p = QuadProgram::boxed(Matrix::<f64>::zeros(2, 2), vec![1.0, -1.0], vec![0.0, 0.0], vec![1.0, 1.0]);
        let s = solve_qp(&p, 1e-8, 50_000).unwrap();
        assert!(s.is_optimal());
        assert!((s.x[0]).abs() < 1e-8 && (s.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn works_in_single_precision() {
        let p = QuadProgram::<f32>::boxed(
            Matrix::from_rows(&[vec![2.0f32]]),
            vec![0.0],
            vec![1.0],
            vec![2.0],
        );
        let s = solve_qp(&p, 1e-5, 10_000).unwrap();
        assert!(s.is_optimal());
        assert!((s.x[0] - 1.0).abs() < 1e-5);
    }
}
