//! Experiment specification: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::game::{valley_profile, EvConfig};
use crate::learner::{InnerBudget, InnerLoopConfig, StepSchedule};
use crate::orchestrator::{BatchSource, RunConfig, RunMode};
use crate::query::QuerySelectorConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: JSON parse error: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("unknown key `{path}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey { path: String, suggestion: Option<String> },
    #[error("`{path}`: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    fn invalid(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// `γ^t = gamma0 / (1 + t)`.
    Harmonic,
    /// `γ^t = 10^{-3(t+1)}`.
    Geometric,
    /// `γ = 1 / (‖[x̂; 1]‖² + μ)`.
    InverseLipschitz,
}

impl StepKind {
    fn schedule(self, gamma0: f64) -> StepSchedule<f64> {
        match self {
            StepKind::Harmonic => StepSchedule::Harmonic { gamma0 },
            StepKind::Geometric => StepSchedule::Geometric,
            StepKind::InverseLipschitz => StepSchedule::InverseLipschitz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSpec {
    pub mu: f64,
    pub step: StepKind,
    pub gamma0: f64,
    /// `t̄ = max(inner_iters_per_k · k, inner_iters_min)` unless
    /// `inner_iters_fixed` is set.
    pub inner_iters_per_k: usize,
    pub inner_iters_min: usize,
    pub inner_iters_fixed: Option<usize>,
    pub grad_cap: f64,
    pub alpha0: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub cov_eps: f64,
    pub batch_source: BatchSource,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            mu: 10.0,
            step: StepKind::Harmonic,
            gamma0: 1e-3,
            inner_iters_per_k: 10,
            inner_iters_min: 10,
            inner_iters_fixed: None,
            grad_cap: 1e6,
            alpha0: 1.0,
            theta_lo: -10.0,
            theta_hi: 10.0,
            cov_eps: 1e-4,
            batch_source: BatchSource::Synthetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NaiveSpec {
    pub step: StepKind,
    pub gamma0: f64,
    pub inner_iters: usize,
}

impl Default for NaiveSpec {
    fn default() -> Self {
        Self {
            step: StepKind::InverseLipschitz,
            gamma0: 1e-3,
            inner_iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSpec {
    /// Required fixed-point residual of the reference equilibrium.
    pub tol: f64,
    /// Inner steps per update in `noisefree_reference` mode.
    pub inner_iters: usize,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            inner_iters: 200,
        }
    }
}

/// Fully resolved experiment: sweep axes, instance source and all
/// algorithm parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub seeds: Vec<u64>,
    pub batch_sizes: Vec<usize>,
    pub modes: Vec<RunMode>,
    /// Outer iterations `K`.
    pub iterations: usize,
    /// Instance JSON (as written by `gen-instance`); when absent each seed
    /// draws its own EV instance from `game`.
    pub instance_path: Option<PathBuf>,
    pub game: EvConfig,
    pub learner: LearnerSpec,
    pub naive: NaiveSpec,
    pub query: QuerySelectorConfig<f64>,
    pub reference: ReferenceSpec,
    /// Write measured per-iteration times to the trace CSVs. Off by default
    /// so that reruns are byte-identical; the column is then all zeros.
    pub record_wall_time: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            batch_sizes: vec![10],
            modes: vec![RunMode::NoisyInexact, RunMode::NaiveBaseline],
            iterations: 200,
            instance_path: None,
            game: EvConfig::default(),
            learner: LearnerSpec::default(),
            naive: NaiveSpec::default(),
            query: QuerySelectorConfig::default(),
            reference: ReferenceSpec::default(),
            record_wall_time: false,
        }
    }
}

impl ExperimentSpec {
    /// Run configuration of one `(mode, S, seed)` cell.
    pub fn run_config(&self, mode: RunMode, batch_size: usize, seed: u64) -> RunConfig<f64> {
        let l = &self.learner;
        let budget = match l.inner_iters_fixed {
            Some(iters) => InnerBudget::Fixed { iters },
            None => InnerBudget::Linear {
                per_k: l.inner_iters_per_k,
                min: l.inner_iters_min,
            },
        };
        let inner = InnerLoopConfig {
            mu: l.mu,
            step: l.step.schedule(l.gamma0),
            budget,
            grad_cap: l.grad_cap,
            alpha0: l.alpha0,
        };
        let naive_inner = InnerLoopConfig {
            step: self.naive.step.schedule(self.naive.gamma0),
            budget: InnerBudget::Fixed {
                iters: self.naive.inner_iters,
            },
            ..inner.clone()
        };
        RunConfig {
            iterations: self.iterations,
            batch_size,
            mode,
            seed,
            batch_source: l.batch_source,
            inner,
            query: self.query.clone(),
            theta_lo: l.theta_lo,
            theta_hi: l.theta_hi,
            cov_eps: l.cov_eps,
            reference_inner_iters: self.reference.inner_iters,
            naive_inner,
        }
    }

    /// Replace defaults that depend on other fields by explicit values.
    fn resolve(&mut self) {
        let t = self.game.horizon;
        if self.game.rho_range.is_none() {
            let s = t as f64 / 14.0;
            self.game.rho_range = Some((1.2 * s, 1.8 * s));
        }
        if self.game.d.is_none() {
            self.game.d = Some(valley_profile(t));
        }
    }

    fn check(&self) -> Result<(), ConfigError> {
        let pos = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::invalid(path, format!("must be a positive finite number, got {v}")))
            }
        };
        if self.seeds.is_empty() {
            return Err(ConfigError::invalid("seeds", "must not be empty"));
        }
        if self.modes.is_empty() {
            return Err(ConfigError::invalid("modes", "must name at least one mode"));
        }
        if self.batch_sizes.is_empty() {
            return Err(ConfigError::invalid("batch_sizes", "must not be empty"));
        }
        if self.batch_sizes.contains(&0) {
            return Err(ConfigError::invalid("batch_sizes", "every S must be >= 1"));
        }
        if self.iterations == 0 {
            return Err(ConfigError::invalid("iterations", "must be >= 1"));
        }
        let g = &self.game;
        if g.n_agents == 0 {
            return Err(ConfigError::invalid("game.n_agents", "must be >= 1"));
        }
        if g.horizon == 0 {
            return Err(ConfigError::invalid("game.horizon", "must be >= 1"));
        }
        for (path, (lo, hi)) in [("game.q_range", g.q_range), ("game.c_range", g.c_range)] {
            if !(lo <= hi) {
                return Err(ConfigError::invalid(path, "lower end exceeds upper end"));
            }
        }
        if !(g.q_range.0 > 0.0) {
            return Err(ConfigError::invalid("game.q_range", "q must be > 0"));
        }
        if let Some((lo, hi)) = g.rho_range {
            if !(0.0 <= lo && lo <= hi) {
                return Err(ConfigError::invalid("game.rho_range", "need 0 <= lo <= hi"));
            }
        }
        pos("game.xbar", g.xbar)?;
        pos("game.cbar", g.cbar)?;
        pos("game.a", g.a)?;
        if !(g.b >= 0.0) {
            return Err(ConfigError::invalid("game.b", "must be >= 0"));
        }
        if let Some(d) = &g.d {
            if d.len() != g.horizon {
                return Err(ConfigError::invalid(
                    "game.d",
                    format!("has {} entries, horizon is {}", d.len(), g.horizon),
                ));
            }
            if d.iter().any(|v| !(*v >= 0.0)) {
                return Err(ConfigError::invalid("game.d", "entries must be >= 0"));
            }
        }
        if !(g.noise_variance >= 0.0) {
            return Err(ConfigError::invalid("game.noise_variance", "must be >= 0"));
        }
        let l = &self.learner;
        pos("learner.mu", l.mu)?;
        pos("learner.gamma0", l.gamma0)?;
        pos("learner.grad_cap", l.grad_cap)?;
        if !(l.alpha0 >= 0.0) {
            return Err(ConfigError::invalid("learner.alpha0", "must be >= 0"));
        }
        if !(l.theta_lo < l.theta_hi) {
            return Err(ConfigError::invalid("learner.theta_lo", "must be < learner.theta_hi"));
        }
        if !(l.cov_eps >= 0.0) {
            return Err(ConfigError::invalid("learner.cov_eps", "must be >= 0"));
        }
        match l.inner_iters_fixed {
            Some(0) => return Err(ConfigError::invalid("learner.inner_iters_fixed", "must be >= 1")),
            None if l.inner_iters_min == 0 => {
                return Err(ConfigError::invalid("learner.inner_iters_min", "must be >= 1"))
            }
            _ => {}
        }
        pos("naive.gamma0", self.naive.gamma0)?;
        if self.naive.inner_iters == 0 {
            return Err(ConfigError::invalid("naive.inner_iters", "must be >= 1"));
        }
        pos("query.slack_eps", self.query.slack_eps)?;
        pos("query.qp_tol", self.query.qp_tol)?;
        if !(self.query.tie_break_ridge >= 0.0) {
            return Err(ConfigError::invalid("query.tie_break_ridge", "must be >= 0"));
        }
        if self.query.max_iter == 0 {
            return Err(ConfigError::invalid("query.max_iter", "must be >= 1"));
        }
        pos("reference.tol", self.reference.tol)?;
        if self.reference.inner_iters == 0 {
            return Err(ConfigError::invalid("reference.inner_iters", "must be >= 1"));
        }
        Ok(())
    }
}

/// Parse, default and validate an experiment spec from JSON text.
pub fn parse_spec(text: &str, origin: &str) -> Result<ExperimentSpec, ConfigError> {
    let value: Value = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
        path: origin.into(),
        source,
    })?;
    let schema = serde_json::to_value(ExperimentSpec::default()).expect("default spec serializes");
    check_keys(&value, &schema, "", &schema)?;
    let mut spec: ExperimentSpec = serde_json::from_value(value).map_err(|e| ConfigError::Invalid {
        path: origin.into(),
        message: e.to_string(),
    })?;
    spec.resolve();
    spec.check()?;
    Ok(spec)
}

/// Read and validate an experiment spec file. `{}` yields the full set of
/// defaults.
pub fn validate_config(path: &Path) -> Result<ExperimentSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_spec(&text, &path.display().to_string())
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Reject keys absent from the schema (the serialized default spec),
/// suggesting the closest known key.
fn check_keys(value: &Value, schema: &Value, prefix: &str, root: &Value) -> Result<(), ConfigError> {
    let (Value::Object(obj), Value::Object(known)) = (value, schema) else {
        return Ok(());
    };
    for (key, v) in obj {
        match known.get(key) {
            Some(sub) => check_keys(v, sub, &join(prefix, key), root)?,
            None => {
                return Err(ConfigError::UnknownKey {
                    path: join(prefix, key),
                    suggestion: suggest(key, known.keys().map(|k| join(prefix, k)), root),
                })
            }
        }
    }
    Ok(())
}

fn all_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(obj) = v {
        for (k, sub) in obj {
            let p = join(prefix, k);
            all_paths(sub, &p, out);
            out.push(p);
        }
    }
}

fn suggest(key: &str, siblings: impl Iterator<Item = String>, root: &Value) -> Option<String> {
    let leaf = |p: &str| p.rsplit('.').next().unwrap_or(p).to_string();
    let mut everything = Vec::new();
    all_paths(root, "", &mut everything);
    // closest leaf name wins; on ties a key of the same object is preferred
    siblings
        .map(|c| (0, c))
        .chain(everything.into_iter().map(|c| (1, c)))
        .map(|(rank, c)| (strsim::levenshtein(key, &leaf(&c)), rank, c))
        .filter(|(d, _, c)| *d <= 2.max(leaf(c).len() / 3))
        .min()
        .map(|(_, _, c)| c)
}
