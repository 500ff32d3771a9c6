//! Outer loop of the active-learning scheme, the noise-free reference
//! equilibrium, and trace metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{stream_rng, GameError, GameInstance, NoiseModel};
use crate::learner::{
    prox_sgd, synth_samples, InnerBudget, InnerLoopConfig, LearnerError, LearnerState, ProxyParams, StepSchedule,
};
use crate::linalg::{dist2, norm2, Matrix};
use crate::qp::{check_feasible, max_violation, solve_qp_with, QpSettings, QpStatus};
use crate::query::{select_query_from, QueryError, QuerySelectorConfig};
use crate::scalar::Scalar;

const TAG_INIT: u64 = 0x696e_6974;
const TAG_SYNTH: u64 = 0x7379_6e74;

/// Tolerance of the per-iteration feasibility assertion on queries (floored
/// at the precision of the scalar type).
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    NoisyInexact,
    NoisefreeReference,
    NaiveBaseline,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::NoisyInexact => "noisy_inexact",
            RunMode::NoisefreeReference => "noisefree_reference",
            RunMode::NaiveBaseline => "naive_baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    /// `S` draws around the latest real probe from the residual covariance.
    Synthetic,
    /// `S` real oracle probes at the current query.
    Probes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct RunConfig<T> {
    /// Outer iterations `K`.
    pub iterations: usize,
    /// Batch size `S`.
    pub batch_size: usize,
    pub mode: RunMode,
    pub seed: u64,
    pub batch_source: BatchSource,
    pub inner: InnerLoopConfig<T>,
    pub query: QuerySelectorConfig<T>,
    pub theta_lo: T,
    pub theta_hi: T,
    /// `R̂⁰ = ε I` before the first residual.
    pub cov_eps: T,
    /// Inner steps (at step `1/L`) emulating the exact update in
    /// `noisefree_reference` mode.
    pub reference_inner_iters: usize,
    /// Inner update used by `naive_baseline`: by default the noise-free
    /// update (step `1/L`) with a fixed budget of 10, fed raw noisy replies.
    pub naive_inner: InnerLoopConfig<T>,
}

impl<T: Scalar> Default for RunConfig<T> {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 10,
            mode: RunMode::NoisyInexact,
            seed: 0,
            batch_source: BatchSource::Synthetic,
            inner: InnerLoopConfig::default(),
            query: QuerySelectorConfig::default(),
            theta_lo: T::lit(-10.0),
            theta_hi: T::lit(10.0),
            cov_eps: T::lit(1e-4),
            reference_inner_iters: 200,
            naive_inner: InnerLoopConfig {
                step: StepSchedule::InverseLipschitz,
                budget: InnerBudget::Fixed { iters: 10 },
                ..InnerLoopConfig::default()
            },
        }
    }
}

impl<T: Scalar> RunConfig<T> {
    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 {
            return Err("iterations (K) must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size (S) must be >= 1".into());
        }
        if !(self.theta_lo < self.theta_hi) {
            return Err("theta box must satisfy lo < hi".into());
        }
        if !(self.cov_eps >= T::zero()) {
            return Err("cov_eps must be >= 0".into());
        }
        if self.reference_inner_iters == 0 {
            return Err("reference_inner_iters must be >= 1".into());
        }
        self.inner.validate().map_err(|e| e.to_string())?;
        self.naive_inner.validate().map_err(|e| format!("naive: {e}"))?;
        self.query.validate()
    }

    fn inner_for_mode(&self) -> InnerLoopConfig<T> {
        match self.mode {
            RunMode::NoisyInexact => self.inner.clone(),
            RunMode::NaiveBaseline => self.naive_inner.clone(),
            RunMode::NoisefreeReference => InnerLoopConfig {
                step: StepSchedule::InverseLipschitz,
                budget: InnerBudget::Fixed {
                    iters: self.reference_inner_iters,
                },
                ..self.inner.clone()
            },
        }
    }
}

/// One outer iteration. Row `k` holds the query `x̂^{k+1}` produced at
/// iteration `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord<T> {
    pub k: usize,
    pub x_hat: Vec<T>,
    pub r_value: T,
    pub rel_dist: Option<T>,
    pub theta_norms: Vec<T>,
    pub wall_time: f64,
    /// Monitored accuracy level `α^k`.
    pub alpha: T,
    pub singleton: bool,
}

impl<T: Scalar> TraceRecord<T> {
    pub fn theta_norm_mean(&self) -> T {
        if self.theta_norms.is_empty() {
            return T::zero();
        }
        self.theta_norms.iter().copied().sum::<T>() / T::lit(self.theta_norms.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceRoute {
    LearnedNoiseFree,
    DampedBestResponse,
    Potential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGne<T> {
    pub x_star: Vec<T>,
    /// `max_i ‖x*_i − f_i(x*_{-i})‖₂`, from exact best responses.
    pub fp_residual: T,
    pub route: ReferenceRoute,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("initial feasible point: solver status {0:?}")]
    Init(QpStatus),
    #[error("query at iteration {k} violates the feasible set by {violation:e}")]
    InfeasibleQuery { k: usize, violation: f64 },
    #[error("reference GNE not certified: best fixed-point residual {best_residual:e}")]
    NoConvergence { best_residual: f64, best: Vec<f64> },
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub trace: Vec<TraceRecord<T>>,
    pub state: LearnerState<T>,
    pub x0: Vec<T>,
}

/// A run aborted by an error; the iterations completed so far are kept.
#[derive(Debug, Clone)]
pub struct RunFailure<T> {
    pub error: RunError,
    pub trace: Vec<TraceRecord<T>>,
}

impl<T> std::fmt::Display for RunFailure<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.trace.len())
    }
}

/// Feasible starting profile: projection of a uniform point of the local
/// boxes onto the collective feasible set.
pub fn initial_point<T: Scalar>(g: &GameInstance<T>, seed: u64) -> Result<Vec<T>, RunError> {
    let mut rng = stream_rng(seed, TAG_INIT, 0, 0);
    let mut u = Vec::with_capacity(g.dim());
    for ag in &g.agents {
        for _ in 0..g.horizon() {
            u.push(T::uniform(&mut rng, T::zero(), ag.xbar));
        }
    }
    let neg_u: Vec<T> = u.iter().map(|&v| -v).collect();
    let p = g.feasible_set_qp(Matrix::identity(g.dim()), neg_u);
    let sol = solve_qp_with(&p, &QpSettings::new(T::lit(1e-10), crate::qp::DEFAULT_MAX_ITER), None)
        .map_err(|e| RunError::Query(e.into()))?;
    if sol.status != QpStatus::Optimal || max_violation(&sol.x, &p) > T::lit(FEASIBILITY_TOL) {
        return Err(RunError::Init(sol.status));
    }
    Ok(sol.x)
}

fn probe_draw(k: usize, j: usize) -> u64 {
    ((k as u64) << 20) | j as u64
}

/// Run the scheme for `cfg.iterations` outer iterations.
pub fn run<T: Scalar>(
    g: &GameInstance<T>,
    noise: &NoiseModel<T>,
    cfg: &RunConfig<T>,
    reference: Option<&ReferenceGne<T>>,
) -> Result<RunOutput<T>, RunFailure<T>> {
    let x0 = initial_point(g, cfg.seed).map_err(|error| RunFailure { error, trace: vec![] })?;
    let proxies = (0..g.n_agents())
        .map(|_| ProxyParams::zeros(g.horizon(), g.dim_minus(), cfg.theta_lo, cfg.theta_hi))
        .collect();
    run_from(g, noise, cfg, reference, x0, Some(proxies), true)
}

/// Run from an explicit starting query and, optionally, explicit initial
/// proxies. With `seed_bias` the bias column of every proxy is overwritten
/// by the first oracle reply (clamped to the box).
pub fn run_from<T: Scalar>(
    g: &GameInstance<T>,
    noise: &NoiseModel<T>,
    cfg: &RunConfig<T>,
    reference: Option<&ReferenceGne<T>>,
    x0: Vec<T>,
    proxies: Option<Vec<ProxyParams<T>>>,
    seed_bias: bool,
) -> Result<RunOutput<T>, RunFailure<T>> {
    let mut trace = Vec::with_capacity(cfg.iterations);
    match run_inner(g, noise, cfg, reference, x0, proxies, seed_bias, &mut trace) {
        Ok((state, x0)) => Ok(RunOutput { trace, state, x0 }),
        Err(error) => Err(RunFailure { error, trace }),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_inner<T: Scalar>(
    g: &GameInstance<T>,
    noise: &NoiseModel<T>,
    cfg: &RunConfig<T>,
    reference: Option<&ReferenceGne<T>>,
    x0: Vec<T>,
    proxies: Option<Vec<ProxyParams<T>>>,
    seed_bias: bool,
    trace: &mut Vec<TraceRecord<T>>,
) -> Result<(LearnerState<T>, Vec<T>), RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let noise = match cfg.mode {
        RunMode::NoisefreeReference => NoiseModel::noiseless(),
        _ => noise.clone(),
    };
    let inner = cfg.inner_for_mode();
    let n = g.n_agents();
    let feasible = g.feasible_set();
    let tol = T::lit(FEASIBILITY_TOL).max(T::epsilon() * T::lit(100.0));

    let probe = |x: &[T], k: usize, j: usize| -> Result<Vec<Vec<T>>, RunError> {
        (0..n)
            .map(|i| Ok(g.noisy_best_response(&noise, i, &g.opponents(x, i), probe_draw(k, j))?))
            .collect()
    };

    let mut x_hat = x0.clone();
    let mut z = probe(&x_hat, 0, 0)?;
    let proxies = proxies.unwrap_or_else(|| {
        (0..n)
            .map(|_| ProxyParams::zeros(g.horizon(), g.dim_minus(), cfg.theta_lo, cfg.theta_hi))
            .collect()
    });
    let mut state = LearnerState::new(proxies, cfg.cov_eps);
    if seed_bias {
        for (agent, zi) in state.agents.iter_mut().zip(&z) {
            let col = agent.proxy.n_in();
            for (r, &v) in zi.iter().enumerate() {
                agent.proxy.lambda[(r, col)] = v.max(cfg.theta_lo).min(cfg.theta_hi);
            }
        }
    }

    for k in 0..cfg.iterations {
        let start = Instant::now();

        // (i)-(ii) per-agent batches and inexact proximal updates
        let extra = match (cfg.mode, cfg.batch_source) {
            (RunMode::NoisyInexact, BatchSource::Probes) => {
                let more: Result<Vec<_>, _> = (1..cfg.batch_size).map(|j| probe(&x_hat, k, j)).collect();
                Some(more?)
            }
            _ => None,
        };
        let mut updated = Vec::with_capacity(n);
        for i in 0..n {
            let x_minus = g.opponents(&x_hat, i);
            let samples = match cfg.mode {
                RunMode::NoisyInexact => match &extra {
                    Some(more) => {
                        let mut s = vec![z[i].clone()];
                        s.extend(more.iter().map(|p| p[i].clone()));
                        s
                    }
                    None => {
                        let mut rng = stream_rng(cfg.seed, TAG_SYNTH, i as u64, k as u64);
                        synth_samples(&state.agents[i].cov, &z[i], cfg.batch_size, &mut rng)?
                    }
                },
                RunMode::NaiveBaseline | RunMode::NoisefreeReference => vec![z[i].clone()],
            };
            let anchor = &state.agents[i].proxy;
            updated.push(prox_sgd(anchor, &samples, &x_minus, &inner, inner.inner_iters(k))?);
        }
        for (agent, p) in state.agents.iter_mut().zip(updated) {
            debug_assert!(p.in_box());
            agent.proxy = p;
        }
        state.k = k + 1;

        // (iii) min-norm query
        let proxies = state.proxies();
        let out = select_query_from(g, &proxies, &cfg.query, Some(&x_hat))?;
        let feasible_now = check_feasible(&out.x_hat, &feasible, tol).map_err(|e| RunError::Query(e.into()))?;
        if !feasible_now {
            return Err(RunError::InfeasibleQuery {
                k,
                violation: max_violation(&out.x_hat, &feasible).as_f64(),
            });
        }
        x_hat = out.x_hat;

        // (iv) oracle replies, (v) residual covariance
        z = probe(&x_hat, k + 1, 0)?;
        if cfg.mode == RunMode::NoisyInexact {
            for i in 0..n {
                let pred = state.agents[i].proxy.eval(&g.opponents(&flatten(&z), i))?;
                let e: Vec<T> = z[i].iter().zip(&pred).map(|(&a, &b)| a - b).collect();
                state.agents[i].push_residual(&e)?;
            }
        }

        trace.push(TraceRecord {
            k,
            rel_dist: reference.map(|r| rel_dist(&x_hat, &r.x_star)),
            x_hat: x_hat.clone(),
            r_value: out.r_value.max(T::zero()),
            theta_norms: state.agents.iter().map(|a| a.proxy.norm()).collect(),
            wall_time: start.elapsed().as_secs_f64(),
            alpha: inner.alpha(k),
            singleton: out.singleton,
        });
        log::debug!("k={k} r={:.3e} singleton={}", out.r_value.as_f64(), out.singleton);
    }
    Ok((state, x0))
}

fn flatten<T: Scalar>(parts: &[Vec<T>]) -> Vec<T> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// `‖x − x*‖₂ / ‖x*‖₂`.
pub fn rel_dist<T: Scalar>(x: &[T], x_star: &[T]) -> T {
    let d = dist2(x, x_star);
    let s = norm2(x_star);
    if s == T::zero() {
        d
    } else {
        d / s
    }
}

/// Noise-free equilibrium with an exact-best-response certificate.
///
/// Routes are tried in order until one certifies `fp_residual ≤ tol`: the
/// learned scheme without noise, damped best-response iteration with
/// `λ = 0.5`, and minimization of the game potential.
pub fn compute_reference_gne<T: Scalar>(g: &GameInstance<T>, tol: T) -> Result<ReferenceGne<T>, RunError> {
    compute_reference_gne_with(g, tol, &RunConfig::default())
}

/// [`compute_reference_gne`] with the learned route configured by `base`
/// (its mode is overridden).
pub fn compute_reference_gne_with<T: Scalar>(
    g: &GameInstance<T>,
    tol: T,
    base: &RunConfig<T>,
) -> Result<ReferenceGne<T>, RunError> {
    let mut best: Option<(T, Vec<T>)> = None;
    let mut consider = |x: Vec<T>, route: ReferenceRoute| -> Result<Option<ReferenceGne<T>>, RunError> {
        let fp = g.fixed_point_residual(&x)?;
        log::debug!("reference route {route:?}: fixed-point residual {:.3e}", fp.as_f64());
        if fp <= tol {
            return Ok(Some(ReferenceGne {
                x_star: x,
                fp_residual: fp,
                route,
            }));
        }
        if best.as_ref().is_none_or(|(b, _)| fp < *b) {
            best = Some((fp, x));
        }
        Ok(None)
    };

    let cfg = RunConfig {
        mode: RunMode::NoisefreeReference,
        ..base.clone()
    };
    if let Ok(out) = run(g, &NoiseModel::noiseless(), &cfg, None) {
        if let Some(last) = out.trace.last() {
            if let Some(r) = consider(last.x_hat.clone(), ReferenceRoute::LearnedNoiseFree)? {
                return Ok(r);
            }
        }
    }

    let mut x = initial_point(g, 0)?;
    let lambda = T::lit(0.5);
    for _ in 0..2000 {
        let br = g.best_response_map(&x)?;
        let step = dist2(&br, &x);
        for (xv, &bv) in x.iter_mut().zip(&br) {
            *xv = (T::one() - lambda) * *xv + lambda * bv;
        }
        if step <= tol * T::lit(1e-2) {
            break;
        }
        if !step.is_finite() || step > T::lit(1e6) {
            break;
        }
    }
    if let Some(r) = consider(x, ReferenceRoute::DampedBestResponse)? {
        return Ok(r);
    }

    let p = g.potential_qp();
    let sol = solve_qp_with(&p, &QpSettings::new(T::lit(1e-12).max(T::epsilon() * T::lit(1e4)), 200_000), None)
        .map_err(|e| RunError::Query(e.into()))?;
    if let Some(r) = consider(sol.x, ReferenceRoute::Potential)? {
        return Ok(r);
    }

    let (b, x) = best.expect("at least one route evaluated");
    Err(RunError::NoConvergence {
        best_residual: b.as_f64(),
        best: x.iter().map(|v| v.as_f64()).collect(),
    })
}

/// Summary statistics of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub final_r_value: f64,
    pub final_rel_dist: Option<f64>,
    pub median_rel_dist: Option<f64>,
    pub mean_rel_dist: Option<f64>,
}

/// Fill `rel_dist` against `reference` (or clear it) and summarize.
pub fn metrics<T: Scalar>(trace: &mut [TraceRecord<T>], reference: Option<&ReferenceGne<T>>) -> Option<TraceSummary> {
    let last = trace.last()?.r_value.as_f64();
    for rec in trace.iter_mut() {
        rec.rel_dist = reference.map(|r| rel_dist(&rec.x_hat, &r.x_star));
    }
    let rd: Vec<f64> = trace.iter().filter_map(|r| r.rel_dist.map(|v| v.as_f64())).collect();
    let have = !rd.is_empty();
    Some(TraceSummary {
        iterations: trace.len(),
        final_r_value: last,
        final_rel_dist: rd.last().copied(),
        median_rel_dist: have.then(|| median(&rd)),
        mean_rel_dist: have.then(|| mean(&rd)),
    })
}

/// Per-iteration mean and (population) standard deviation of `rel_dist`
/// across traces of equal length.
pub fn across_seeds<T: Scalar>(traces: &[Vec<TraceRecord<T>>]) -> Vec<(f64, f64)> {
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    (0..len)
        .map(|k| {
            let v: Vec<f64> = traces
                .iter()
                .filter_map(|t| t[k].rel_dist.map(|r| r.as_f64()))
                .collect();
            (mean(&v), std_dev(&v))
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Linear-interpolation quantile, `q ∈ [0, 1]`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

pub fn iqr(v: &[f64]) -> f64 {
    quantile(v, 0.75) - quantile(v, 0.25)
}

/// Least-squares slope of `y` against its index.
pub fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = mean(y);
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let dx = i as f64 - xm;
        num += dx * (v - ym);
        den += dx * dx;
    }
    num / den
}
