//! Aggregative EV-charging game: agent specs, exact and noisy best
//! responses, and random instance generation.
//!
//! Agent `i` chooses an injection profile `x_i ∈ R^T` minimizing
//!
//! ```text
//! x_iᵀ Q_i x_i + c_iᵀ x_i + (a (σ(x) + d) + b 1)ᵀ x_i
//! s.t. 1ᵀ x_i ≥ ρ_i,  0 ≤ x_i ≤ x̄_i,  σ(x) ≤ c̄
//! ```
//!
//! with `σ(x) = (1/N) Σ_j x_j`. Collective vectors are agent-major:
//! `x[i*T..(i+1)*T]` is agent `i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::qp::{self, QpError, QpSettings, QpStatus, QuadProgram};
use crate::scalar::Scalar;

/// Slack allowed when checking that an oracle query lies inside the
/// opponents' local boxes.
pub const QUERY_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("instance has no feasible collective profile")]
    NoFeasiblePoint,
    #[error("agent {agent} has no feasible response to the given opponents' profile")]
    Infeasible { agent: usize },
    #[error("query rejected: opponent {opponent} is outside its local box at step {step}")]
    QueryOutOfBounds { opponent: usize, step: usize },
    #[error("agent index {0} out of range")]
    NoSuchAgent(usize),
    #[error("best-response solve failed for agent {agent}: {status:?}")]
    Solver { agent: usize, status: QpStatus },
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec<T> {
    /// Diagonal of the degradation quadratic term `Q_i`.
    pub q: Vec<T>,
    /// Affine degradation cost `c_i`.
    pub c: Vec<T>,
    /// Minimum total charge `ρ_i`.
    pub rho: T,
    /// Per-step injection cap `x̄_i`.
    pub xbar: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec<T> {
    /// Inverse price elasticity.
    pub a: T,
    /// Baseline price.
    pub b: T,
    /// Normalized inflexible demand entering the price term.
    pub d: Vec<T>,
    /// Grid capacity on the aggregate.
    pub cbar: T,
    pub n_agents: usize,
    pub horizon: usize,
    /// Read the capacity constraint as `σ(x) + d ≤ c̄` instead of `σ(x) ≤ c̄`.
    #[serde(default)]
    pub include_d_in_cap: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianAdditive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel<T> {
    pub kind: NoiseKind,
    /// Per-component variance of the additive noise.
    pub variance: T,
    /// Root of the per-agent random streams.
    pub seed: u64,
}

impl<T: Scalar> NoiseModel<T> {
    pub fn gaussian(variance: T, seed: u64) -> Self {
        Self {
            kind: NoiseKind::GaussianAdditive,
            variance,
            seed,
        }
    }

    pub fn noiseless() -> Self {
        Self::gaussian(T::zero(), 0)
    }

    /// Deterministic stream for `(agent, draw)`; independent of call order.
    pub fn stream(&self, agent: usize, draw: u64) -> ChaCha8Rng {
        stream_rng(self.seed, 0x6f72_6163_6c65, agent as u64, draw)
    }
}

/// ChaCha stream keyed by four words. Different `(root, tag, a, b)` tuples
/// give independent streams.
pub fn stream_rng(root: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&root.to_le_bytes());
    seed[8..16].copy_from_slice(&tag.to_le_bytes());
    seed[16..24].copy_from_slice(&a.to_le_bytes());
    seed[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameInstance<T> {
    pub agents: Vec<AgentSpec<T>>,
    pub coupling: CouplingSpec<T>,
}

/// Parameter ranges for [`sample_ev_instance`]. Every field can be replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvConfig {
    pub n_agents: usize,
    pub horizon: usize,
    pub q_range: (f64, f64),
    pub c_range: (f64, f64),
    /// Range of the charge requirement; `None` uses `(1.2, 1.8)` scaled by
    /// `horizon / 14`, so shortened horizons stay feasible.
    pub rho_range: Option<(f64, f64)>,
    pub xbar: f64,
    pub cbar: f64,
    pub a: f64,
    pub b: f64,
    /// Price-term demand profile; `None` selects the built-in valley.
    pub d: Option<Vec<f64>>,
    pub include_d_in_cap: bool,
    pub noise_variance: f64,
}

impl Default for EvConfig {
    fn default() -> Self {
        Self {
            n_agents: 10,
            horizon: 14,
            q_range: (0.006, 0.01),
            c_range: (0.055, 0.095),
            rho_range: None,
            xbar: 0.25,
            cbar: 0.2,
            a: 0.8,
            b: 0.02,
            d: None,
            include_d_in_cap: false,
            noise_variance: 0.1,
        }
    }
}

/// Smooth demand dip over the horizon, peaking at `0.1` on the edges.
pub fn valley_profile(horizon: usize) -> Vec<f64> {
    (0..horizon)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * (t as f64 + 0.5) / horizon as f64;
            0.05 * (1.0 + phase.cos())
        })
        .collect()
}

/// Draw an EV instance and its noise model from `seed`.
pub fn sample_ev_instance<T: Scalar>(seed: u64, cfg: &EvConfig) -> Result<(GameInstance<T>, NoiseModel<T>), GameError> {
    if cfg.n_agents == 0 || cfg.horizon == 0 {
        return Err(GameError::InvalidInstance("n_agents and horizon must be positive".into()));
    }
    let rho_range = cfg.rho_range.unwrap_or_else(|| {
        let s = cfg.horizon as f64 / 14.0;
        (1.2 * s, 1.8 * s)
    });
    for (name, (lo, hi)) in [("q_range", cfg.q_range), ("c_range", cfg.c_range), ("rho_range", rho_range)] {
        if !(lo <= hi) {
            return Err(GameError::InvalidInstance(format!("{name} has lo > hi")));
        }
    }
    let mut rng = stream_rng(seed, 0x696e_7374, 0, 0);
    let t_len = cfg.horizon;
    let agents = (0..cfg.n_agents)
        .map(|_| {
            let q = T::uniform(&mut rng, T::lit(cfg.q_range.0), T::lit(cfg.q_range.1));
            let c = (0..t_len)
                .map(|_| T::uniform(&mut rng, T::lit(cfg.c_range.0), T::lit(cfg.c_range.1)))
                .collect();
            let rho = T::uniform(&mut rng, T::lit(rho_range.0), T::lit(rho_range.1));
            AgentSpec {
                q: vec![q; t_len],
                c,
                rho,
                xbar: T::lit(cfg.xbar),
            }
        })
        .collect();
    let d = match &cfg.d {
        Some(d) => d.clone(),
        None => valley_profile(t_len),
    };
    let coupling = CouplingSpec {
        a: T::lit(cfg.a),
        b: T::lit(cfg.b),
        d: d.into_iter().map(T::lit).collect(),
        cbar: T::lit(cfg.cbar),
        n_agents: cfg.n_agents,
        horizon: t_len,
        include_d_in_cap: cfg.include_d_in_cap,
    };
    let game = GameInstance::new(agents, coupling)?;
    if !(cfg.noise_variance >= 0.0) {
        return Err(GameError::InvalidInstance("noise variance must be nonnegative".into()));
    }
    let noise = NoiseModel::gaussian(T::lit(cfg.noise_variance), seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok((game, noise))
}

impl<T: Scalar> GameInstance<T> {
    /// Validate all invariants, including the existence of a feasible
    /// collective profile (one QP solve).
    pub fn new(agents: Vec<AgentSpec<T>>, coupling: CouplingSpec<T>) -> Result<Self, GameError> {
        let g = Self { agents, coupling };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let cp = &self.coupling;
        let (n, t_len) = (cp.n_agents, cp.horizon);
        let bad = |m: String| Err(GameError::InvalidInstance(m));
        if n == 0 || t_len == 0 {
            return bad("n_agents and horizon must be positive".into());
        }
        if self.agents.len() != n {
            return bad(format!("{} agent specs for n_agents = {n}", self.agents.len()));
        }
        if !(cp.a > T::zero()) {
            return bad("a must be > 0".into());
        }
        if !(cp.b >= T::zero()) {
            return bad("b must be >= 0".into());
        }
        if !(cp.cbar > T::zero()) {
            return bad("cbar must be > 0".into());
        }
        if cp.d.len() != t_len || cp.d.iter().any(|&v| !(v >= T::zero())) {
            return bad("d must have length horizon and nonnegative entries".into());
        }
        for (i, ag) in self.agents.iter().enumerate() {
            if ag.q.len() != t_len || ag.c.len() != t_len {
                return bad(format!("agent {i}: q and c must have length horizon"));
            }
            if ag.q.iter().any(|&v| !(v > T::zero())) {
                return bad(format!("agent {i}: q entries must be > 0"));
            }
            if ag.c.iter().any(|v| !v.is_finite()) {
                return bad(format!("agent {i}: c must be finite"));
            }
            if !(ag.xbar > T::zero()) {
                return bad(format!("agent {i}: xbar must be > 0"));
            }
            if !(ag.rho >= T::zero()) || ag.rho > T::lit(t_len as f64) * ag.xbar {
                return bad(format!("agent {i}: rho must lie in [0, T*xbar]"));
            }
        }
        let witness = self.feasible_set_qp(Matrix::identity(self.dim()), vec![T::zero(); self.dim()]);
        let sol = qp::solve_qp(&witness, solver_tol::<T>(1e-9), qp::DEFAULT_MAX_ITER)?;
        if sol.status != QpStatus::Optimal {
            return Err(GameError::NoFeasiblePoint);
        }
        Ok(())
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.coupling.n_agents
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.coupling.horizon
    }

    /// Total decision dimension `N·T`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.n_agents() * self.horizon()
    }

    /// Opponents' dimension `(N-1)·T`.
    #[inline]
    pub fn dim_minus(&self) -> usize {
        self.dim() - self.horizon()
    }

    /// Number of proxy parameters per agent, `n_i (n_{-i} + 1)`.
    pub fn proxy_param_count(&self) -> usize {
        self.horizon() * (self.dim_minus() + 1)
    }

    /// Upper bound on `σ_t`: `c̄`, or `c̄ - d_t` when the demand counts
    /// against the capacity.
    pub fn cap(&self, t: usize) -> T {
        let cp = &self.coupling;
        if cp.include_d_in_cap {
            cp.cbar - cp.d[t]
        } else {
            cp.cbar
        }
    }

    pub fn agent_slice<'x>(&self, x: &'x [T], i: usize) -> &'x [T] {
        let t = self.horizon();
        &x[i * t..(i + 1) * t]
    }

    /// Stack `x_{-i}` out of a collective vector.
    pub fn opponents(&self, x: &[T], i: usize) -> Vec<T> {
        let t = self.horizon();
        let mut out = Vec::with_capacity(self.dim_minus());
        out.extend_from_slice(&x[..i * t]);
        out.extend_from_slice(&x[(i + 1) * t..]);
        out
    }

    /// Reassemble a collective vector from `x_i` and `x_{-i}`.
    pub fn join(&self, i: usize, x_i: &[T], x_minus_i: &[T]) -> Vec<T> {
        let t = self.horizon();
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&x_minus_i[..i * t]);
        out.extend_from_slice(x_i);
        out.extend_from_slice(&x_minus_i[i * t..]);
        out
    }

    /// Per-step mean across agents.
    pub fn aggregate(&self, x: &[T]) -> Result<Vec<T>, GameError> {
        aggregate(x, self.n_agents(), self.horizon())
    }

    /// QP over the collective feasible set `Ω ∩ X` with the given objective.
    pub fn feasible_set_qp(&self, h: Matrix<T>, g: Vec<T>) -> QuadProgram<T> {
        let (n, t_len) = (self.n_agents(), self.horizon());
        let dim = self.dim();
        let mut a = Matrix::zeros(n + t_len, dim);
        let mut b = Vec::with_capacity(n + t_len);
        for (i, ag) in self.agents.iter().enumerate() {
            for t in 0..t_len {
                a[(i, i * t_len + t)] = -T::one();
            }
            b.push(-ag.rho);
        }
        let inv_n = T::one() / T::lit(n as f64);
        for t in 0..t_len {
            for i in 0..n {
                a[(n + t, i * t_len + t)] = inv_n;
            }
            b.push(self.cap(t));
        }
        let mut ub = Vec::with_capacity(dim);
        for ag in &self.agents {
            ub.extend(std::iter::repeat_n(ag.xbar, t_len));
        }
        QuadProgram {
            h,
            g,
            a_ineq: a,
            b_ineq: b,
            lb: vec![T::zero(); dim],
            ub,
        }
    }

    /// Exact potential of the game over the collective feasible set:
    ///
    /// ```text
    /// P(x) = Σ_i (x_iᵀQ_i x_i + (c_i + a d + b)ᵀx_i) + (a/2N)(‖Σ_i x_i‖² + Σ_i ‖x_i‖²)
    /// ```
    ///
    /// Its partial gradient in `x_i` equals that of agent `i`'s cost, so its
    /// minimizer is a (variational) GNE.
    pub fn potential_qp(&self) -> QuadProgram<T> {
        let (n, t_len) = (self.n_agents(), self.horizon());
        let cp = &self.coupling;
        let w = cp.a / T::lit(n as f64);
        let mut h = Matrix::zeros(self.dim(), self.dim());
        let mut g = Vec::with_capacity(self.dim());
        for (i, ag) in self.agents.iter().enumerate() {
            for t in 0..t_len {
                let r = i * t_len + t;
                for j in 0..n {
                    h[(r, j * t_len + t)] = w;
                }
                h[(r, r)] += T::lit(2.0) * ag.q[t] + w;
                g.push(ag.c[t] + cp.a * cp.d[t] + cp.b);
            }
        }
        self.feasible_set_qp(h, g)
    }

    /// Feasibility constraints only (zero objective).
    pub fn feasible_set(&self) -> QuadProgram<T> {
        self.feasible_set_qp(Matrix::zeros(self.dim(), self.dim()), vec![T::zero(); self.dim()])
    }

    fn check_query(&self, i: usize, x_minus_i: &[T]) -> Result<(), GameError> {
        if i >= self.n_agents() {
            return Err(GameError::NoSuchAgent(i));
        }
        if x_minus_i.len() != self.dim_minus() {
            return Err(GameError::DimensionMismatch(format!(
                "opponents vector has length {}, expected {}",
                x_minus_i.len(),
                self.dim_minus()
            )));
        }
        let t_len = self.horizon();
        let tol = T::lit(QUERY_TOL).max(T::epsilon() * T::lit(100.0));
        for (pos, &v) in x_minus_i.iter().enumerate() {
            let slot = pos / t_len;
            let opponent = if slot < i { slot } else { slot + 1 };
            let xbar = self.agents[opponent].xbar;
            if !(v >= -tol && v <= xbar + tol) {
                return Err(GameError::QueryOutOfBounds {
                    opponent,
                    step: pos % t_len,
                });
            }
        }
        Ok(())
    }

    /// The best-response QP of agent `i` against `x_{-i}`. The coupling cap
    /// is folded into the upper bounds of `x_i`.
    pub fn best_response_qp(&self, i: usize, x_minus_i: &[T]) -> Result<QuadProgram<T>, GameError> {
        self.check_query(i, x_minus_i)?;
        let cp = &self.coupling;
        let (n, t_len) = (self.n_agents(), self.horizon());
        let ag = &self.agents[i];
        let nf = T::lit(n as f64);
        let mut others = vec![T::zero(); t_len];
        for (pos, &v) in x_minus_i.iter().enumerate() {
            others[pos % t_len] += v;
        }
        let h_diag: Vec<T> = ag.q.iter().map(|&q| T::lit(2.0) * (q + cp.a / nf)).collect();
        let g: Vec<T> = (0..t_len)
            .map(|t| ag.c[t] + cp.a / nf * others[t] + cp.a * cp.d[t] + cp.b)
            .collect();
        let tol = T::lit(QUERY_TOL).max(T::epsilon() * T::lit(100.0));
        let mut ub = Vec::with_capacity(t_len);
        for (t, &s) in others.iter().enumerate() {
            let room = nf * self.cap(t) - s;
            if room < -tol {
                return Err(GameError::Infeasible { agent: i });
            }
            ub.push(ag.xbar.min(room.max(T::zero())));
        }
        let total: T = ub.iter().copied().sum();
        if total < ag.rho - tol {
            return Err(GameError::Infeasible { agent: i });
        }
        let mut row = Matrix::zeros(1, t_len);
        row.row_mut(0).iter_mut().for_each(|v| *v = -T::one());
        Ok(QuadProgram {
            h: Matrix::from_diag(&h_diag),
            g,
            a_ineq: row,
            b_ineq: vec![-ag.rho],
            lb: vec![T::zero(); t_len],
            ub,
        })
    }

    /// Exact best response `f_i(x_{-i})`.
    pub fn best_response(&self, i: usize, x_minus_i: &[T]) -> Result<Vec<T>, GameError> {
        let p = self.best_response_qp(i, x_minus_i)?;
        let settings = QpSettings::new(solver_tol::<T>(1e-10), qp::DEFAULT_MAX_ITER);
        let sol = qp::solve_qp_with(&p, &settings, None)?;
        match sol.status {
            QpStatus::Optimal => Ok(sol.x),
            QpStatus::Infeasible => Err(GameError::Infeasible { agent: i }),
            status => Err(GameError::Solver { agent: i, status }),
        }
    }

    /// Best response of agent `i` given the full collective vector.
    pub fn best_response_at(&self, i: usize, x: &[T]) -> Result<Vec<T>, GameError> {
        if x.len() != self.dim() {
            return Err(GameError::DimensionMismatch("collective vector".into()));
        }
        self.best_response(i, &self.opponents(x, i))
    }

    /// Stacked exact best responses of all agents at `x`.
    pub fn best_response_map(&self, x: &[T]) -> Result<Vec<T>, GameError> {
        let mut out = Vec::with_capacity(self.dim());
        for i in 0..self.n_agents() {
            out.extend(self.best_response_at(i, x)?);
        }
        Ok(out)
    }

    /// `max_i ‖x_i − f_i(x_{-i})‖₂`, the fixed-point certificate of a GNE.
    pub fn fixed_point_residual(&self, x: &[T]) -> Result<T, GameError> {
        let mut worst = T::zero();
        for i in 0..self.n_agents() {
            let br = self.best_response_at(i, x)?;
            worst = worst.max(crate::linalg::dist2(self.agent_slice(x, i), &br));
        }
        Ok(worst)
    }

    /// Noisy oracle reply `f_i(x_{-i}) + η` with `η ~ N(0, variance·I)`.
    /// `draw` addresses the agent's stream, so equal draws reproduce equal
    /// noise and distinct draws are independent.
    pub fn noisy_best_response(
        &self,
        noise: &NoiseModel<T>,
        i: usize,
        x_minus_i: &[T],
        draw: u64,
    ) -> Result<Vec<T>, GameError> {
        let mut z = self.best_response(i, x_minus_i)?;
        add_noise(noise, i, draw, &mut z);
        Ok(z)
    }

    /// Cost of agent `i` at the collective profile `x`.
    pub fn cost(&self, i: usize, x: &[T]) -> Result<T, GameError> {
        let sigma = self.aggregate(x)?;
        let ag = &self.agents[i];
        let cp = &self.coupling;
        let xi = self.agent_slice(x, i);
        let mut j = T::zero();
        for t in 0..self.horizon() {
            j += ag.q[t] * xi[t] * xi[t] + ag.c[t] * xi[t] + (cp.a * (sigma[t] + cp.d[t]) + cp.b) * xi[t];
        }
        Ok(j)
    }
}

/// `base`, floored at the precision of `T`.
fn solver_tol<T: Scalar>(base: f64) -> T {
    T::lit(base).max(T::epsilon() * T::lit(100.0))
}

/// Add the oracle noise of `(agent, draw)` to `z` in place.
pub fn add_noise<T: Scalar>(noise: &NoiseModel<T>, agent: usize, draw: u64, z: &mut [T]) {
    if noise.variance == T::zero() {
        return;
    }
    let sd = noise.variance.sqrt();
    let mut rng = noise.stream(agent, draw);
    for v in z.iter_mut() {
        *v += sd * T::standard_normal(&mut rng);
    }
}

/// `σ(x) = (1/N) Σ_i x_i` for an agent-major collective vector.
pub fn aggregate<T: Scalar>(x: &[T], n_agents: usize, horizon: usize) -> Result<Vec<T>, GameError> {
    if n_agents == 0 || x.len() != n_agents * horizon {
        return Err(GameError::DimensionMismatch(format!(
            "collective vector has length {}, expected {}",
            x.len(),
            n_agents * horizon
        )));
    }
    let mut s = vec![T::zero(); horizon];
    for chunk in x.chunks(horizon) {
        for (acc, &v) in s.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    let inv = T::one() / T::lit(n_agents as f64);
    s.iter_mut().for_each(|v| *v *= inv);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_game() -> GameInstance<f64> {
        GameInstance::new(
            vec![AgentSpec {
                q: vec![0.008],
                c: vec![0.07],
                rho: 0.1,
                xbar: 0.25,
            }],
            CouplingSpec {
                a: 0.8,
                b: 0.02,
                d: vec![0.0],
                cbar: 0.3,
                n_agents: 1,
                horizon: 1,
                include_d_in_cap: false,
            },
        )
        .unwrap()
    }

    #[test]
    fn one_dimensional_best_response_clamps_to_requirement() {
        let g = scalar_game();
        let (q, c, a, b): (f64, f64, f64, f64) = (0.008, 0.07, 0.8, 0.02);
        let unconstrained = -(c + b) / (2.0 * (q + a));
        let expected: f64 = unconstrained.clamp(0.1, 0.25f64.min(0.3));
        let br = g.best_response(0, &[]).unwrap();
        assert!((br[0] - expected).abs() < 1e-9, "{br:?}");
        assert!((expected - 0.1).abs() < 1e-15);
    }

    #[test]
    fn symmetric_agents_respond_identically() {
        let spec = AgentSpec {
            q: vec![0.008; 3],
            c: vec![0.06, 0.08, 0.07],
            rho: 0.4,
            xbar: 0.25,
        };
        let g = GameInstance::new(
            vec![spec.clone(), spec.clone(), spec],
            CouplingSpec {
                a: 0.8,
                b: 0.02,
                d: vec![0.0, 0.05, 0.1],
                cbar: 0.2,
                n_agents: 3,
                horizon: 3,
                include_d_in_cap: false,
            },
        )
        .unwrap();
        let x = vec![0.1, 0.2, 0.1, 0.1, 0.2, 0.1, 0.1, 0.2, 0.1];
        let b0 = g.best_response_at(0, &x).unwrap();
        for i in 1..3 {
            let bi = g.best_response_at(i, &x).unwrap();
            assert!(crate::linalg::dist2(&b0, &bi) < 1e-9);
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[0.0, 1.0, 1.0, 0.0], 2, 2).unwrap(), vec![0.5, 0.5]);
        let v = [0.3, 0.1, 0.7];
        let x: Vec<f64> = v.iter().cycle().take(12).copied().collect();
        let s = aggregate(&x, 4, 3).unwrap();
        for (a, b) in s.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(aggregate(&[1.0, 2.0, 3.0], 2, 2).is_err());
    }

    #[test]
    fn zero_variance_oracle_is_exact() {
        let (g, _) = sample_ev_instance::<f64>(3, &EvConfig { n_agents: 3, horizon: 4, ..EvConfig::default() }).unwrap();
        let x = vec![0.12; g.dim()];
        let xm = g.opponents(&x, 1);
        let exact = g.best_response(1, &xm).unwrap();
        let noisy = g.noisy_best_response(&NoiseModel::noiseless(), 1, &xm, 17).unwrap();
        assert_eq!(exact, noisy);
    }

    #[test]
    fn oracle_streams_are_reproducible_and_distinct() {
        let noise = NoiseModel::<f64>::gaussian(0.1, 42);
        let mut a = vec![0.0; 5];
        let mut b = vec![0.0; 5];
        add_noise(&noise, 2, 9, &mut a);
        add_noise(&noise, 2, 9, &mut b);
        assert_eq!(a, b);
        let mut c = vec![0.0; 5];
        add_noise(&noise, 2, 10, &mut c);
        assert_ne!(a, c);
        let mut d = vec![0.0; 5];
        add_noise(&noise, 3, 9, &mut d);
        assert_ne!(a, d);
    }

    #[test]
    fn default_ev_dimensions() {
        let (g, noise) = sample_ev_instance::<f64>(1, &EvConfig::default()).unwrap();
        assert_eq!(g.dim(), 140);
        assert_eq!(g.proxy_param_count(), 1778);
        assert_eq!(noise.variance, 0.1);
        for ag in &g.agents {
            assert!(ag.q[0] >= 0.006 && ag.q[0] < 0.01);
            assert!(ag.c.iter().all(|&c| (0.055..0.095).contains(&c)));
            assert!((1.2..1.8).contains(&ag.rho));
            assert_eq!(ag.xbar, 0.25);
        }
        assert_eq!(g.coupling.cbar, 0.2);
    }

    #[test]
    fn same_seed_same_instance() {
        let a = sample_ev_instance::<f64>(77, &EvConfig::default()).unwrap();
        let b = sample_ev_instance::<f64>(77, &EvConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = sample_ev_instance::<f64>(78, &EvConfig::default()).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn infeasible_override_is_rejected() {
        // ρ ≥ 1.2 but the grid only admits σ ≤ 0.01 over 3 steps
        let cfg = EvConfig { n_agents: 2, horizon: 3, cbar: 0.01, xbar: 0.5, ..EvConfig::default() };
        assert!(matches!(sample_ev_instance::<f64>(1, &cfg), Err(GameError::NoFeasiblePoint)));
        let cfg = EvConfig { n_agents: 2, horizon: 3, rho_range: Some((1.2, 1.8)), ..EvConfig::default() };
        assert!(matches!(sample_ev_instance::<f64>(1, &cfg), Err(GameError::InvalidInstance(_))));
        let cfg = EvConfig { n_agents: 2, horizon: 3, ..EvConfig::default() };
        assert!(sample_ev_instance::<f64>(1, &cfg).is_ok());
    }

    #[test]
    fn queries_outside_boxes_are_rejected() {
        let (g, _) = sample_ev_instance::<f64>(5, &EvConfig { n_agents: 2, horizon: 8, ..EvConfig::default() }).unwrap();
        let mut xm = vec![0.1; 8];
        xm[3] = 0.3;
        assert_eq!(
            g.best_response(0, &xm),
            Err(GameError::QueryOutOfBounds { opponent: 1, step: 3 })
        );
        assert!(matches!(g.best_response(0, &[0.1; 3]), Err(GameError::DimensionMismatch(_))));
        assert_eq!(g.best_response(2, &[0.1; 8]), Err(GameError::NoSuchAgent(2)));
    }

    #[test]
    fn exhausted_capacity_is_infeasible() {
        let (g, _) = sample_ev_instance::<f64>(
            5,
            &EvConfig { n_agents: 2, horizon: 8, cbar: 0.15, ..EvConfig::default() },
        )
        .unwrap();
        // opponent saturates the grid on every step: agent 0 can inject at most 0.05 per step
        let xm = vec![0.25; 8];
        assert_eq!(g.best_response(0, &xm), Err(GameError::Infeasible { agent: 0 }));
    }
}
