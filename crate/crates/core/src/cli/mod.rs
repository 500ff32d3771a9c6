//! Command-line experiment harness: seed and batch-size sweeps, trace CSVs,
//! plot-ready aggregates and a manifest.

mod spec;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::game::{sample_ev_instance, AgentSpec, CouplingSpec, GameInstance, NoiseModel};
use crate::orchestrator::{
    across_seeds, compute_reference_gne_with, metrics, run, ReferenceGne, ReferenceRoute, RunMode, TraceRecord,
};

pub use spec::{parse_spec, validate_config, ConfigError, ExperimentSpec, LearnerSpec, NaiveSpec, ReferenceSpec, StepKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub const TRACE_HEADER: &str = "k,r_value,rel_dist,wall_time_s,theta_norm_mean";

#[derive(Debug, Parser)]
#[command(name = "gne-active", version, about = "Active learning of generalized Nash equilibria from noisy best responses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every (mode, S, seed) cell of an experiment spec.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Write one sampled EV instance as JSON.
    GenInstance {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional spec whose `game` section overrides the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute and certify the reference equilibrium of every seed.
    Reference {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Instance file: agents, coupling and noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub agents: Vec<AgentSpec<f64>>,
    pub coupling: CouplingSpec<f64>,
    pub noise: NoiseModel<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub mode: RunMode,
    pub batch_size: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub trace_file: Option<String>,
    pub iterations_completed: usize,
    pub final_r_value: Option<f64>,
    pub final_rel_dist: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub seed: u64,
    pub fp_residual: Option<f64>,
    pub route: Option<ReferenceRoute>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ExperimentSpec,
    pub seed_offset: u64,
    /// Seeds actually used (`spec.seeds` shifted by `seed_offset`).
    pub seeds: Vec<u64>,
    pub references: Vec<ReferenceRecord>,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("every cell failed")]
    AllFailed,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::AllFailed => EXIT_SOLVER,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn trace_file_name(mode: RunMode, batch_size: usize, seed: u64) -> String {
    format!("trace_{}_S{}_seed{}.csv", mode.as_str(), batch_size, seed)
}

/// Trace CSV; `rel_dist` is empty when no reference is available.
pub fn trace_csv(trace: &[TraceRecord<f64>], wall_time: bool) -> String {
    let mut s = String::with_capacity(64 * (trace.len() + 1));
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in trace {
        let rd = r.rel_dist.map(|v| format!("{v:e}")).unwrap_or_default();
        let wt = if wall_time { r.wall_time } else { 0.0 };
        let _ = writeln!(s, "{},{:e},{},{:e},{:e}", r.k, r.r_value, rd, wt, r.theta_norm_mean());
    }
    s
}

/// Instance and noise model used by a seed.
pub fn load_instance(spec: &ExperimentSpec, seed: u64) -> Result<(GameInstance<f64>, NoiseModel<f64>), String> {
    match &spec.instance_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let doc: InstanceDoc = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            let g = GameInstance::new(doc.agents, doc.coupling).map_err(|e| e.to_string())?;
            let noise = NoiseModel {
                seed: doc.noise.seed.wrapping_add(seed),
                ..doc.noise
            };
            Ok((g, noise))
        }
        None => sample_ev_instance(seed, &spec.game).map_err(|e| e.to_string()),
    }
}

fn reference_for(spec: &ExperimentSpec, g: &GameInstance<f64>) -> Result<ReferenceGne<f64>, String> {
    let base = spec.run_config(RunMode::NoisefreeReference, 1, 0);
    compute_reference_gne_with(g, spec.reference.tol, &base).map_err(|e| e.to_string())
}

/// Run `f` over `0..n` on up to `jobs` threads; results keep index order.
fn parallel_map<R: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

struct SeedSetup {
    seed: u64,
    instance: Result<(GameInstance<f64>, NoiseModel<f64>), String>,
    reference: Option<ReferenceGne<f64>>,
    record: ReferenceRecord,
}

fn setup_seeds(spec: &ExperimentSpec, seeds: &[u64], jobs: usize) -> Vec<SeedSetup> {
    parallel_map(seeds.len(), jobs, |idx| {
        let seed = seeds[idx];
        let instance = load_instance(spec, seed);
        let reference = match &instance {
            Ok((g, _)) => reference_for(spec, g),
            Err(e) => Err(format!("instance: {e}")),
        };
        let record = match &reference {
            Ok(r) => ReferenceRecord {
                seed,
                fp_residual: Some(r.fp_residual),
                route: Some(r.route),
                error: None,
            },
            Err(e) => {
                log::warn!("seed {seed}: no reference equilibrium ({e})");
                ReferenceRecord {
                    seed,
                    fp_residual: None,
                    route: None,
                    error: Some(e.clone()),
                }
            }
        };
        SeedSetup {
            seed,
            instance,
            reference: reference.ok(),
            record,
        }
    })
}

struct CellOutcome {
    record: CellRecord,
    rel_dist: Vec<f64>,
}

/// Execute every cell of `spec`, writing traces, aggregates and the
/// manifest into `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, jobs: usize, seed_offset: u64) -> Result<Manifest, CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let seeds: Vec<u64> = spec.seeds.iter().map(|s| s.wrapping_add(seed_offset)).collect();
    let setups = setup_seeds(spec, &seeds, jobs);

    let mut cells = Vec::new();
    for &mode in &spec.modes {
        for &s in &spec.batch_sizes {
            for idx in 0..setups.len() {
                cells.push((mode, s, idx));
            }
        }
    }
    let outcomes = parallel_map(cells.len(), jobs, |c| {
        let (mode, batch_size, idx) = cells[c];
        run_cell(spec, out, mode, batch_size, &setups[idx])
    });
    let outcomes: Vec<CellOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;

    let mut fig1 = String::from("S,seed,final_rel_dist\n");
    for o in &outcomes {
        let r = &o.record;
        if r.mode == RunMode::NoisyInexact && r.status == CellStatus::Ok {
            if let Some(v) = r.final_rel_dist {
                let _ = writeln!(fig1, "{},{},{:e}", r.batch_size, r.seed, v);
            }
        }
    }
    write_atomic(&out.join("fig1_boxdata.csv"), fig1.as_bytes())?;

    let mut fig2 = String::from("mode,S,k,mean_rel_dist,std_rel_dist\n");
    for &mode in &spec.modes {
        for &s in &spec.batch_sizes {
            let series: Vec<Vec<TraceRecord<f64>>> = outcomes
                .iter()
                .filter(|o| o.record.mode == mode && o.record.batch_size == s && o.record.status == CellStatus::Ok)
                .filter(|o| o.rel_dist.len() == spec.iterations)
                .map(|o| {
                    o.rel_dist
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| TraceRecord {
                            k,
                            x_hat: vec![],
                            r_value: 0.0,
                            rel_dist: Some(v),
                            theta_norms: vec![],
                            wall_time: 0.0,
                            alpha: 0.0,
                            singleton: true,
                        })
                        .collect()
                })
                .collect();
            if series.is_empty() {
                continue;
            }
            for (k, (m, sd)) in across_seeds(&series).into_iter().enumerate() {
                let _ = writeln!(fig2, "{},{},{},{:e},{:e}", mode.as_str(), s, k, m, sd);
            }
        }
    }
    write_atomic(&out.join("fig2_series.csv"), fig2.as_bytes())?;

    let manifest = Manifest {
        spec: spec.clone(),
        seed_offset,
        seeds,
        references: setups.into_iter().map(|s| s.record).collect(),
        cells: outcomes.into_iter().map(|o| o.record).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

fn run_cell(
    spec: &ExperimentSpec,
    out: &Path,
    mode: RunMode,
    batch_size: usize,
    setup: &SeedSetup,
) -> Result<CellOutcome, CliError> {
    let seed = setup.seed;
    let mut record = CellRecord {
        mode,
        batch_size,
        seed,
        status: CellStatus::Failed,
        trace_file: None,
        iterations_completed: 0,
        final_r_value: None,
        final_rel_dist: None,
        error: None,
    };
    let (g, noise) = match &setup.instance {
        Ok(pair) => pair,
        Err(e) => {
            record.error = Some(format!("instance: {e}"));
            return Ok(CellOutcome { record, rel_dist: vec![] });
        }
    };
    let cfg = spec.run_config(mode, batch_size, seed);
    let reference = setup.reference.as_ref();
    let (mut trace, error) = match run(g, noise, &cfg, reference) {
        Ok(o) => (o.trace, None),
        Err(f) => (f.trace, Some(f.error.to_string())),
    };
    let summary = metrics(&mut trace, reference);
    let name = trace_file_name(mode, batch_size, seed);
    write_atomic(&out.join(&name), trace_csv(&trace, spec.record_wall_time).as_bytes())?;
    log::info!(
        "{} S={batch_size} seed={seed}: {}",
        mode.as_str(),
        match (&error, summary.as_ref().and_then(|s| s.final_rel_dist)) {
            (Some(e), _) => format!("failed: {e}"),
            (None, Some(rd)) => format!("final rel_dist {rd:.4}"),
            (None, None) => "done".into(),
        }
    );
    record.trace_file = Some(name);
    record.iterations_completed = trace.len();
    record.final_r_value = summary.as_ref().map(|s| s.final_r_value);
    record.final_rel_dist = summary.as_ref().and_then(|s| s.final_rel_dist);
    record.status = if error.is_none() { CellStatus::Ok } else { CellStatus::Failed };
    record.error = error;
    let rel_dist = trace.iter().filter_map(|r| r.rel_dist).collect();
    Ok(CellOutcome { record, rel_dist })
}

/// `gen-instance`: sample one instance and write it as JSON.
pub fn gen_instance(seed: u64, out: &Path, config: Option<&Path>) -> Result<InstanceDoc, CliError> {
    let spec = match config {
        Some(p) => validate_config(p)?,
        None => ExperimentSpec::default(),
    };
    let (g, noise) = sample_ev_instance::<f64>(seed, &spec.game).map_err(|e| {
        CliError::Config(ConfigError::Invalid {
            path: "game".into(),
            message: e.to_string(),
        })
    })?;
    let doc = InstanceDoc {
        agents: g.agents,
        coupling: g.coupling,
        noise,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let json = serde_json::to_string_pretty(&doc).expect("instance serializes");
    write_atomic(out, json.as_bytes())?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDoc {
    pub seed: u64,
    pub x_star: Vec<f64>,
    pub fp_residual: f64,
    pub route: ReferenceRoute,
}

/// `reference`: certify the reference equilibrium of every seed and write
/// `reference_seed<seed>.json`.
pub fn reference_command(spec: &ExperimentSpec, out: &Path, jobs: usize) -> Result<Vec<ReferenceRecord>, CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let setups = setup_seeds(spec, &spec.seeds, jobs);
    for s in &setups {
        if let Some(r) = &s.reference {
            let doc = ReferenceDoc {
                seed: s.seed,
                x_star: r.x_star.clone(),
                fp_residual: r.fp_residual,
                route: r.route,
            };
            let json = serde_json::to_string_pretty(&doc).expect("reference serializes");
            write_atomic(&out.join(format!("reference_seed{}.json", s.seed)), json.as_bytes())?;
        }
    }
    let records: Vec<ReferenceRecord> = setups.into_iter().map(|s| s.record).collect();
    if records.iter().all(|r| r.error.is_some()) {
        return Err(CliError::AllFailed);
    }
    Ok(records)
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            seed_offset,
        } => validate_config(&config)
            .map_err(CliError::from)
            .and_then(|spec| run_experiment(&spec, &out, jobs, seed_offset))
            .and_then(|m| {
                let failed = m.cells.iter().filter(|c| c.status == CellStatus::Failed).count();
                if failed > 0 {
                    log::warn!("{failed} of {} cells failed", m.cells.len());
                }
                if !m.cells.is_empty() && failed == m.cells.len() {
                    Err(CliError::AllFailed)
                } else {
                    Ok(())
                }
            }),
        Command::GenInstance { seed, out, config } => gen_instance(seed, &out, config.as_deref()).map(|_| ()),
        Command::Reference { config, out } => validate_config(&config)
            .map_err(CliError::from)
            .and_then(|spec| reference_command(&spec, &out, 1))
            .map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
