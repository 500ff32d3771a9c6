//! Affine best-response surrogates and their inexact proximal update.
//!
//! Agent `i`'s surrogate is `f̂_i(x_{-i}) = Λ_i [x_{-i}; 1]` with `Λ_i` kept
//! inside the box `[lo, hi]` componentwise. Each outer iteration runs a
//! stochastic proximal gradient loop on
//!
//! ```text
//! ½ E‖z − Λ [x̂_{-i}; 1]‖² + (μ/2) ‖Λ − Λ^k‖²
//! ```
//!
//! using a batch of samples all taken at the same query `x̂_{-i}`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm2, symmetric_eigen, Cholesky, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty sample batch")]
    EmptyBatch,
    #[error("agent index {0} out of range")]
    NoSuchAgent(usize),
    #[error("invalid inner-loop configuration: {0}")]
    InvalidConfig(String),
}

fn mismatch(what: &str, got: usize, want: usize) -> LearnerError {
    LearnerError::DimensionMismatch(format!("{what}: got length {got}, expected {want}"))
}

/// Affine surrogate `Λ` (shape `n_out × (n_in + 1)`, last column is the bias)
/// and its parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyParams<T> {
    pub lambda: Matrix<T>,
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> ProxyParams<T> {
    pub fn zeros(n_out: usize, n_in: usize, lo: T, hi: T) -> Self {
        Self {
            lambda: Matrix::zeros(n_out, n_in + 1),
            lo,
            hi,
        }
    }

    /// Zero slopes with the bias column set to `bias`, clamped to the box.
    pub fn with_bias(n_in: usize, bias: &[T], lo: T, hi: T) -> Self {
        let mut p = Self::zeros(bias.len(), n_in, lo, hi);
        for (r, &b) in bias.iter().enumerate() {
            p.lambda[(r, n_in)] = b.max(lo).min(hi);
        }
        p
    }

    pub fn n_out(&self) -> usize {
        self.lambda.rows()
    }

    pub fn n_in(&self) -> usize {
        self.lambda.cols() - 1
    }

    /// Number of scalar parameters, `n_out (n_in + 1)`.
    pub fn len(&self) -> usize {
        self.lambda.rows() * self.lambda.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major vectorization `θ` of `Λ`.
    pub fn theta(&self) -> &[T] {
        self.lambda.as_slice()
    }

    pub fn bias(&self) -> Vec<T> {
        let c = self.n_in();
        (0..self.n_out()).map(|r| self.lambda[(r, c)]).collect()
    }

    pub fn in_box(&self) -> bool {
        self.theta().iter().all(|&v| v >= self.lo && v <= self.hi)
    }

    pub fn clamp(&mut self) {
        let (lo, hi) = (self.lo, self.hi);
        self.lambda.as_mut_slice().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
    }

    pub fn norm(&self) -> T {
        self.lambda.frobenius_norm()
    }

    /// `Λ [x_{-i}; 1]`.
    pub fn eval(&self, x_minus_i: &[T]) -> Result<Vec<T>, LearnerError> {
        if x_minus_i.len() != self.n_in() {
            return Err(mismatch("proxy input", x_minus_i.len(), self.n_in()));
        }
        let n_in = self.n_in();
        Ok((0..self.n_out())
            .map(|r| {
                let row = self.lambda.row(r);
                dot(&row[..n_in], x_minus_i) + row[n_in]
            })
            .collect())
    }
}

/// `Λ [x_{-i}; 1]`.
pub fn proxy_eval<T: Scalar>(pp: &ProxyParams<T>, x_minus_i: &[T]) -> Result<Vec<T>, LearnerError> {
    pp.eval(x_minus_i)
}

/// `½ ‖z − pred‖²`.
pub fn mse_loss<T: Scalar>(z: &[T], pred: &[T]) -> Result<T, LearnerError> {
    if z.len() != pred.len() {
        return Err(mismatch("prediction", pred.len(), z.len()));
    }
    let mut s = T::zero();
    for (&a, &b) in z.iter().zip(pred) {
        s += (a - b) * (a - b);
    }
    Ok(T::lit(0.5) * s)
}

/// Gradient of [`mse_loss`] with respect to `Λ`:
/// `(Λ [x; 1] − z) [x; 1]ᵀ`.
pub fn loss_grad<T: Scalar>(pp: &ProxyParams<T>, x_minus_i: &[T], z: &[T]) -> Result<Matrix<T>, LearnerError> {
    let pred = pp.eval(x_minus_i)?;
    if z.len() != pp.n_out() {
        return Err(mismatch("sample", z.len(), pp.n_out()));
    }
    let xt = augmented(x_minus_i);
    let mut g = Matrix::zeros(pp.n_out(), xt.len());
    for r in 0..pp.n_out() {
        let e = pred[r] - z[r];
        for (gv, &xv) in g.row_mut(r).iter_mut().zip(&xt) {
            *gv = e * xv;
        }
    }
    Ok(g)
}

/// `[x; 1]`.
pub fn augmented<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut v = Vec::with_capacity(x.len() + 1);
    v.extend_from_slice(x);
    v.push(T::one());
    v
}

/// Inner-loop step size `γ^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule<T> {
    /// `γ^t = γ₀ / (1 + t)`.
    Harmonic { gamma0: T },
    /// `γ^t = 10^{-3(t+1)}`.
    Geometric,
    /// Constant `1 / L` with `L = ‖[x̂; 1]‖² + μ` the smoothness constant of
    /// the proximal objective; the projected iteration then converges
    /// linearly to the exact proximal point.
    InverseLipschitz,
}

impl<T: Scalar> StepSchedule<T> {
    pub fn gamma(&self, t: usize, lipschitz: T) -> T {
        match *self {
            StepSchedule::Harmonic { gamma0 } => gamma0 / T::lit((1 + t) as f64),
            StepSchedule::Geometric => T::lit(10f64.powi(-3 * (t as i32 + 1))),
            StepSchedule::InverseLipschitz => T::one() / lipschitz,
        }
    }
}

/// How many inner steps run at outer iteration `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnerBudget {
    /// `max(per_k · k, min)`.
    Linear { per_k: usize, min: usize },
    Fixed { iters: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerLoopConfig<T> {
    /// Proximal weight `μ`.
    pub mu: T,
    pub step: StepSchedule<T>,
    pub budget: InnerBudget,
    /// Frobenius cap on each inner search direction.
    pub grad_cap: T,
    /// Scale of the monitored accuracy sequence `α^k = α₀ / (1 + k)²`.
    pub alpha0: T,
}

impl<T: Scalar> Default for InnerLoopConfig<T> {
    fn default() -> Self {
        Self {
            mu: T::lit(10.0),
            step: StepSchedule::Harmonic { gamma0: T::lit(1e-3) },
            budget: InnerBudget::Linear { per_k: 10, min: 10 },
            grad_cap: T::lit(1e6),
            alpha0: T::one(),
        }
    }
}

impl<T: Scalar> InnerLoopConfig<T> {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.mu > T::zero()) {
            return Err(LearnerError::InvalidConfig("mu must be > 0".into()));
        }
        if let StepSchedule::Harmonic { gamma0 } = self.step {
            if !(gamma0 > T::zero()) {
                return Err(LearnerError::InvalidConfig("gamma0 must be > 0".into()));
            }
        }
        if !(self.grad_cap > T::zero()) {
            return Err(LearnerError::InvalidConfig("grad_cap must be > 0".into()));
        }
        match self.budget {
            InnerBudget::Linear { per_k, min } if per_k == 0 && min == 0 => {
                Err(LearnerError::InvalidConfig("inner budget is always zero".into()))
            }
            InnerBudget::Fixed { iters: 0 } => Err(LearnerError::InvalidConfig("inner budget is zero".into())),
            _ => Ok(()),
        }
    }

    pub fn inner_iters(&self, k: usize) -> usize {
        match self.budget {
            InnerBudget::Linear { per_k, min } => (per_k * k).max(min),
            InnerBudget::Fixed { iters } => iters,
        }
    }

    pub fn alpha(&self, k: usize) -> T {
        let d = T::lit((1 + k) as f64);
        self.alpha0 / (d * d)
    }
}

/// Sample second moment of residuals and a factor `V` with `V Vᵀ = R̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate<T> {
    pub r_hat: Matrix<T>,
    pub v: Matrix<T>,
    pub count: usize,
}

impl<T: Scalar> CovEstimate<T> {
    /// `ε I` placeholder used before any residual is available.
    pub fn cold_start(n: usize, eps: T) -> Self {
        let mut r_hat = Matrix::identity(n);
        r_hat.scale(eps);
        let mut v = Matrix::identity(n);
        v.scale(eps.sqrt());
        Self { r_hat, v, count: 0 }
    }

    pub fn from_second_moment(r_hat: Matrix<T>, count: usize) -> Self {
        let v = psd_factor(&r_hat);
        Self { r_hat, v, count }
    }
}

/// Factor `V` with `V Vᵀ = A` for a symmetric PSD `A`: Cholesky when
/// positive definite, otherwise the eigen square root (zero columns kept).
pub fn psd_factor<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    let n = a.rows();
    let scale = a.max_abs();
    if scale == T::zero() {
        return Matrix::zeros(n, n);
    }
    if let Some(ch) = Cholesky::new(a) {
        let l = ch.into_factor();
        let diag_min = (0..n).map(|i| l[(i, i)]).fold(T::infinity(), |m, v| m.min(v));
        if diag_min * diag_min > T::lit(1e-12) * scale {
            return l;
        }
    }
    let (w, u) = symmetric_eigen(a);
    let mut v = Matrix::zeros(n, n);
    for (k, &wk) in w.iter().enumerate() {
        let s = wk.max(T::zero()).sqrt();
        for r in 0..n {
            v[(r, k)] = u[(r, k)] * s;
        }
    }
    v
}

/// Per-agent learner: surrogate, residual history and covariance estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLearner<T> {
    pub proxy: ProxyParams<T>,
    pub residuals: Vec<Vec<T>>,
    /// `Σ_j e_j e_jᵀ`.
    moment_sum: Matrix<T>,
    pub cov: CovEstimate<T>,
}

impl<T: Scalar> AgentLearner<T> {
    pub fn new(proxy: ProxyParams<T>, cold_start_eps: T) -> Self {
        let n = proxy.n_out();
        Self {
            proxy,
            residuals: Vec::new(),
            moment_sum: Matrix::zeros(n, n),
            cov: CovEstimate::cold_start(n, cold_start_eps),
        }
    }

    /// Append a residual and refresh `R̂ = (1/k) Σ e eᵀ` and its factor.
    pub fn push_residual(&mut self, e: &[T]) -> Result<&CovEstimate<T>, LearnerError> {
        let n = self.proxy.n_out();
        if e.len() != n {
            return Err(mismatch("residual", e.len(), n));
        }
        for r in 0..n {
            let er = e[r];
            for (m, &ec) in self.moment_sum.row_mut(r).iter_mut().zip(e) {
                *m += er * ec;
            }
        }
        self.residuals.push(e.to_vec());
        let k = self.residuals.len();
        let mut r_hat = self.moment_sum.clone();
        r_hat.scale(T::one() / T::lit(k as f64));
        self.cov = CovEstimate::from_second_moment(r_hat, k);
        Ok(&self.cov)
    }
}

/// All agents' learners plus the outer iteration index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState<T> {
    pub agents: Vec<AgentLearner<T>>,
    pub k: usize,
}

impl<T: Scalar> LearnerState<T> {
    pub fn new(proxies: Vec<ProxyParams<T>>, cold_start_eps: T) -> Self {
        Self {
            agents: proxies.into_iter().map(|p| AgentLearner::new(p, cold_start_eps)).collect(),
            k: 0,
        }
    }

    pub fn proxies(&self) -> Vec<ProxyParams<T>> {
        self.agents.iter().map(|a| a.proxy.clone()).collect()
    }

    fn agent(&self, i: usize) -> Result<&AgentLearner<T>, LearnerError> {
        self.agents.get(i).ok_or(LearnerError::NoSuchAgent(i))
    }
}

/// Run the inner stochastic proximal gradient loop for agent `i` at outer
/// iteration `k`, starting from and anchored at the current `θ_i^k`.
pub fn inner_prox_update<T: Scalar>(
    state: &LearnerState<T>,
    i: usize,
    samples: &[Vec<T>],
    x_hat_minus_i: &[T],
    cfg: &InnerLoopConfig<T>,
    k: usize,
) -> Result<ProxyParams<T>, LearnerError> {
    let anchor = &state.agent(i)?.proxy;
    prox_sgd(anchor, samples, x_hat_minus_i, cfg, cfg.inner_iters(k))
}

fn batch_mean<T: Scalar>(anchor: &ProxyParams<T>, samples: &[Vec<T>], x: &[T]) -> Result<Vec<T>, LearnerError> {
    if samples.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    if x.len() != anchor.n_in() {
        return Err(mismatch("query", x.len(), anchor.n_in()));
    }
    let n = anchor.n_out();
    let mut mean = vec![T::zero(); n];
    for z in samples {
        if z.len() != n {
            return Err(mismatch("sample", z.len(), n));
        }
        for (m, &v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    let inv = T::one() / T::lit(samples.len() as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// `iters` projected steps of
/// `ξ ← Π(ξ − γ^t ((1/S) Σ_j ∇ℓ(ξ; z_j) + μ (ξ − θ^k)))`.
///
/// All samples share the query, so the averaged loss gradient is the loss
/// gradient at the batch mean, and while no projection is active every
/// iterate has the form `θ^k + v [x̂; 1]ᵀ`. That rank-one form is tracked with
/// `O(n_out)` work per step; whenever the next iterate could leave the box the
/// loop falls back to full matrix steps.
pub fn prox_sgd<T: Scalar>(
    anchor: &ProxyParams<T>,
    samples: &[Vec<T>],
    x_hat_minus_i: &[T],
    cfg: &InnerLoopConfig<T>,
    iters: usize,
) -> Result<ProxyParams<T>, LearnerError> {
    let zbar = batch_mean(anchor, samples, x_hat_minus_i)?;
    let xt = augmented(x_hat_minus_i);
    let s = dot(&xt, &xt);
    let lipschitz = s + cfg.mu;
    let xt_norm = s.sqrt();
    let n = anchor.n_out();
    let pred0 = anchor.eval(x_hat_minus_i)?;
    let r: Vec<T> = pred0.iter().zip(&zbar).map(|(&p, &z)| p - z).collect();

    let xmax = xt.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let row_hi: Vec<T> = (0..n)
        .map(|a| anchor.lambda.row(a).iter().fold(T::neg_infinity(), |m, &v| m.max(v)))
        .collect();
    let row_lo: Vec<T> = (0..n)
        .map(|a| anchor.lambda.row(a).iter().fold(T::infinity(), |m, &v| m.min(v)))
        .collect();
    let safe = |v: &[T]| -> bool {
        (0..n).all(|a| {
            let reach = v[a].abs() * xmax;
            row_hi[a] + reach <= anchor.hi && row_lo[a] - reach >= anchor.lo
        })
    };
    if !anchor.in_box() {
        return prox_sgd_dense_from(anchor, anchor.clone(), &zbar, &xt, cfg, 0, iters);
    }

    let mut v = vec![T::zero(); n];
    let mut dir = vec![T::zero(); n];
    for t in 0..iters {
        for a in 0..n {
            dir[a] = r[a] + v[a] * lipschitz;
        }
        let norm = norm2(&dir) * xt_norm;
        let mut gamma = cfg.step.gamma(t, lipschitz);
        if norm > cfg.grad_cap {
            gamma *= cfg.grad_cap / norm;
        }
        let next: Vec<T> = (0..n).map(|a| v[a] - gamma * dir[a]).collect();
        if !safe(&next) {
            let xi = materialize(anchor, &v, &xt);
            return prox_sgd_dense_from(anchor, xi, &zbar, &xt, cfg, t, iters);
        }
        v = next;
    }
    Ok(materialize(anchor, &v, &xt))
}

fn materialize<T: Scalar>(anchor: &ProxyParams<T>, v: &[T], xt: &[T]) -> ProxyParams<T> {
    let mut out = anchor.clone();
    for (a, &va) in v.iter().enumerate() {
        if va != T::zero() {
            crate::linalg::axpy(va, xt, out.lambda.row_mut(a));
        }
    }
    out.clamp();
    out
}

/// Reference implementation of [`prox_sgd`] with full matrix steps only.
pub fn prox_sgd_dense<T: Scalar>(
    anchor: &ProxyParams<T>,
    samples: &[Vec<T>],
    x_hat_minus_i: &[T],
    cfg: &InnerLoopConfig<T>,
    iters: usize,
) -> Result<ProxyParams<T>, LearnerError> {
    let zbar = batch_mean(anchor, samples, x_hat_minus_i)?;
    let xt = augmented(x_hat_minus_i);
    prox_sgd_dense_from(anchor, anchor.clone(), &zbar, &xt, cfg, 0, iters)
}

fn prox_sgd_dense_from<T: Scalar>(
    anchor: &ProxyParams<T>,
    mut xi: ProxyParams<T>,
    zbar: &[T],
    xt: &[T],
    cfg: &InnerLoopConfig<T>,
    t0: usize,
    iters: usize,
) -> Result<ProxyParams<T>, LearnerError> {
    let n = anchor.n_out();
    let lipschitz = dot(xt, xt) + cfg.mu;
    let mut grad = Matrix::zeros(n, xt.len());
    for t in t0..iters {
        for a in 0..n {
            let row = xi.lambda.row(a);
            let e = dot(row, xt) - zbar[a];
            let anchor_row = anchor.lambda.row(a);
            for (c, gv) in grad.row_mut(a).iter_mut().enumerate() {
                *gv = e * xt[c] + cfg.mu * (row[c] - anchor_row[c]);
            }
        }
        let norm = grad.frobenius_norm();
        let mut gamma = cfg.step.gamma(t, lipschitz);
        if norm > cfg.grad_cap {
            gamma *= cfg.grad_cap / norm;
        }
        for (x, &g) in xi.lambda.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *x -= gamma * g;
        }
        xi.clamp();
    }
    Ok(xi)
}

/// Exact proximal point for a batch at one query when the box is inactive:
/// `Λ^k + v [x̂; 1]ᵀ` with `v = (z̄ − Λ^k [x̂; 1]) / (μ + ‖[x̂; 1]‖²)`.
pub fn exact_prox_unconstrained<T: Scalar>(
    anchor: &ProxyParams<T>,
    samples: &[Vec<T>],
    x_hat_minus_i: &[T],
    mu: T,
) -> Result<ProxyParams<T>, LearnerError> {
    let zbar = batch_mean(anchor, samples, x_hat_minus_i)?;
    let xt = augmented(x_hat_minus_i);
    let denom = mu + dot(&xt, &xt);
    let pred = anchor.eval(x_hat_minus_i)?;
    let v: Vec<T> = zbar.iter().zip(&pred).map(|(&z, &p)| (z - p) / denom).collect();
    let mut out = anchor.clone();
    for (a, &va) in v.iter().enumerate() {
        crate::linalg::axpy(va, &xt, out.lambda.row_mut(a));
    }
    Ok(out)
}

/// Append `e_new` to agent `i`'s residual history and return the refreshed
/// covariance estimate.
pub fn update_covariance<T: Scalar>(
    state: &mut LearnerState<T>,
    i: usize,
    e_new: &[T],
) -> Result<CovEstimate<T>, LearnerError> {
    let agent = state.agents.get_mut(i).ok_or(LearnerError::NoSuchAgent(i))?;
    agent.push_residual(e_new).cloned()
}

/// `S` draws `z_anchor + V ν_j`, `ν_j ~ N(0, I)`.
pub fn synth_samples<T: Scalar, R: Rng + ?Sized>(
    cov: &CovEstimate<T>,
    z_anchor: &[T],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<T>>, LearnerError> {
    let n = cov.v.rows();
    if z_anchor.len() != n {
        return Err(mismatch("anchor", z_anchor.len(), n));
    }
    if count == 0 {
        return Err(LearnerError::EmptyBatch);
    }
    let mut nu = vec![T::zero(); cov.v.cols()];
    Ok((0..count)
        .map(|_| {
            nu.iter_mut().for_each(|v| *v = T::standard_normal(rng));
            let mut z = cov.v.mul_vec(&nu);
            for (zv, &a) in z.iter_mut().zip(z_anchor) {
                *zv += a;
            }
            z
        })
        .collect())
}
