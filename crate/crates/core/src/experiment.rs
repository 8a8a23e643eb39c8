//! Declarative experiment specs, batch execution and plot-data export.
//!
//! A spec is a TOML document; see the book chapter on file formats for the
//! full key reference.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    run_method, write_snapshot_csv, AgentConfig, Method, Monitor, SnapshotRecorder, StopMode, TrajectoryLog,
    SCHEMA_VERSION,
};
use crate::gp::{ConfidenceSchedule, Kernel};
use crate::gridworld::{
    ingest_elevation_grid, lipschitz_constant, sample_gp_environment, sample_gp_reward, slope_safety_from_elevation,
    ElevationField, ElevationFormat, EnvironmentTruth, GridWorld, ObservationNoise, State,
};
use crate::planning::{DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};

/// Seed offset for the `auto` start-state draw, keeping it independent of
/// the environment and observation streams.
const START_STREAM: u64 = 0x5741_5254;

/// A validation failure tied to a spec field.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {message}")]
pub struct SpecError {
    pub field: String,
    pub message: String,
}

impl SpecError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        SpecError {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// The literal `"auto"` or an explicit value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Auto<T> {
    Auto(AutoKeyword),
    Value(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoKeyword {
    #[serde(rename = "auto")]
    Auto,
}

impl<T> Auto<T> {
    pub fn auto() -> Self {
        Auto::Auto(AutoKeyword::Auto)
    }

    pub fn value(&self) -> Option<&T> {
        match self {
            Auto::Auto(_) => None,
            Auto::Value(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub environment: EnvironmentSpec,
    pub agent: AgentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    Synthetic(SyntheticSpec),
    Elevation(ElevationSpec),
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default = "one")]
    pub cell_size: f64,
    #[serde(default = "one")]
    pub r_max: f64,
    pub reward_kernel: Kernel,
    pub safety_kernel: Kernel,
    #[serde(default)]
    pub noise: ObservationNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElevationSpec {
    pub file: PathBuf,
    pub format: ElevationFormat,
    pub cell_size: Option<f64>,
    #[serde(default = "one")]
    pub r_max: f64,
    pub reward_kernel: Kernel,
    #[serde(default)]
    pub noise: ObservationNoise,
}

fn default_discount() -> f64 {
    0.99
}
fn default_alpha() -> ConfidenceSchedule {
    ConfidenceSchedule::Fixed { value: 3.0 }
}
fn default_beta() -> ConfidenceSchedule {
    ConfidenceSchedule::Fixed { value: 2.0 }
}
fn default_max_steps() -> usize {
    2000
}
fn default_model_noise() -> f64 {
    1e-4
}
fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn auto<T>() -> Auto<T> {
    Auto::auto()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub threshold: f64,
    #[serde(default = "auto")]
    pub lipschitz: Auto<f64>,
    #[serde(default = "default_discount")]
    pub discount: f64,
    pub eps_g: f64,
    #[serde(default = "default_alpha")]
    pub alpha: ConfidenceSchedule,
    #[serde(default = "default_beta")]
    pub beta: ConfidenceSchedule,
    #[serde(default)]
    pub scale_is_squared: bool,
    #[serde(default = "auto")]
    pub start: Auto<[usize; 2]>,
    #[serde(default = "auto")]
    pub initial_safe_set: Auto<Vec<[usize; 2]>>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    pub reward_kernel: Option<Kernel>,
    pub safety_kernel: Option<Kernel>,
    #[serde(default = "default_model_noise")]
    pub reward_noise_variance: f64,
    #[serde(default = "default_model_noise")]
    pub safety_noise_variance: f64,
    #[serde(default = "default_tolerance")]
    pub vi_tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub vi_max_iter: usize,
    #[serde(default)]
    pub record_sets: bool,
}

/// A parsed, validated spec with its inputs loaded.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub spec: ExperimentSpec,
    elevation: Option<ElevationField>,
}

/// One fully resolved (world, environment, agent) triple.
#[derive(Debug, Clone)]
pub struct Instance {
    pub world: GridWorld,
    pub env: EnvironmentTruth,
    pub config: AgentConfig,
}

/// Drop `.` and resolve `..` lexically.
fn clean_path(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other),
        }
    }
    out
}

fn check_kernel(field: &str, k: &Kernel) -> Result<(), SpecError> {
    k.validate().map_err(|e| SpecError::new(field, e.to_string()))
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        toml::from_str(text).map_err(|e| SpecError::new("spec", e.to_string().trim_end().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("specs serialize")
    }

    /// Read, normalize and validate a spec; paths are resolved against the
    /// spec's directory.
    pub fn load(path: &Path) -> Result<LoadedSpec, SpecError> {
        let text = fs::read_to_string(path)
            .map_err(|e| SpecError::new("spec", format!("cannot read {}: {e}", path.display())))?;
        let mut spec = ExperimentSpec::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
        spec.load_inputs()
    }

    fn resolve_paths(&mut self, base: &Path) {
        let absolute = |p: &Path| {
            let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            clean_path(&std::path::absolute(&joined).unwrap_or(joined))
        };
        self.output_dir = absolute(&self.output_dir);
        if let EnvironmentSpec::Elevation(e) = &mut self.environment {
            e.file = absolute(&e.file);
        }
    }

    /// Fill defaults that depend on the environment block.
    fn normalize(&mut self) {
        let (rk, sk) = match &self.environment {
            EnvironmentSpec::Synthetic(s) => (Some(s.reward_kernel), Some(s.safety_kernel)),
            EnvironmentSpec::Elevation(e) => (Some(e.reward_kernel), None),
        };
        if self.agent.reward_kernel.is_none() {
            self.agent.reward_kernel = rk;
        }
        if self.agent.safety_kernel.is_none() {
            self.agent.safety_kernel = sk;
        }
    }

    fn validate(&self) -> Result<(), SpecError> {
        if self.seeds.is_empty() {
            return Err(SpecError::new("seeds", "seed list must be nonempty"));
        }
        if self.methods.is_empty() {
            return Err(SpecError::new("methods", "method list must be nonempty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return Err(SpecError::new("seeds", format!("duplicate seed {s}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(SpecError::new("methods", format!("duplicate method {m}")));
            }
        }
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SpecError::new(field, format!("must be positive, got {v}")))
            }
        };
        let noise = |prefix: &str, n: &ObservationNoise| {
            for (k, v) in [("reward_std", n.reward_std), ("safety_std", n.safety_std)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(SpecError::new(format!("{prefix}.noise.{k}"), format!("must be nonnegative, got {v}")));
                }
            }
            Ok(())
        };
        match &self.environment {
            EnvironmentSpec::Synthetic(s) => {
                if s.width == 0 || s.height == 0 {
                    return Err(SpecError::new("environment", "grid dimensions must be positive"));
                }
                positive("environment.cell_size", s.cell_size)?;
                positive("environment.r_max", s.r_max)?;
                check_kernel("environment.reward_kernel", &s.reward_kernel)?;
                check_kernel("environment.safety_kernel", &s.safety_kernel)?;
                noise("environment", &s.noise)?;
            }
            EnvironmentSpec::Elevation(e) => {
                let Some(c) = e.cell_size else {
                    return Err(SpecError::new(
                        "environment.cell_size",
                        "required for elevation environments",
                    ));
                };
                positive("environment.cell_size", c)?;
                positive("environment.r_max", e.r_max)?;
                check_kernel("environment.reward_kernel", &e.reward_kernel)?;
                noise("environment", &e.noise)?;
            }
        }
        let a = &self.agent;
        if !a.threshold.is_finite() {
            return Err(SpecError::new("agent.threshold", "must be finite"));
        }
        if let Some(&l) = a.lipschitz.value() {
            if !(l.is_finite() && l >= 0.0) {
                return Err(SpecError::new("agent.lipschitz", format!("must be nonnegative, got {l}")));
            }
        }
        if !(a.discount < 1.0) {
            return Err(SpecError::new("agent.discount", format!("discount must be < 1, got {}", a.discount)));
        }
        if !(a.discount >= 0.0) {
            return Err(SpecError::new("agent.discount", format!("discount must be >= 0, got {}", a.discount)));
        }
        positive("agent.eps_g", a.eps_g)?;
        a.alpha
            .validate()
            .map_err(|e| SpecError::new("agent.alpha", e.to_string()))?;
        a.beta.validate().map_err(|e| SpecError::new("agent.beta", e.to_string()))?;
        if a.max_steps == 0 {
            return Err(SpecError::new("agent.max_steps", "must be positive"));
        }
        match &a.reward_kernel {
            Some(k) => check_kernel("agent.reward_kernel", k)?,
            None => return Err(SpecError::new("agent.reward_kernel", "required")),
        }
        match &a.safety_kernel {
            Some(k) => check_kernel("agent.safety_kernel", k)?,
            None => {
                return Err(SpecError::new(
                    "agent.safety_kernel",
                    "required for elevation environments",
                ))
            }
        }
        for (field, v) in [
            ("agent.reward_noise_variance", a.reward_noise_variance),
            ("agent.safety_noise_variance", a.safety_noise_variance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SpecError::new(field, format!("must be nonnegative, got {v}")));
            }
        }
        if a.beta.is_theoretical() && a.safety_noise_variance <= 0.0 {
            return Err(SpecError::new(
                "agent.safety_noise_variance",
                "a theoretical beta schedule needs a positive noise variance",
            ));
        }
        if a.alpha.is_theoretical() && a.reward_noise_variance <= 0.0 {
            return Err(SpecError::new(
                "agent.reward_noise_variance",
                "a theoretical alpha schedule needs a positive noise variance",
            ));
        }
        positive("agent.vi_tolerance", a.vi_tolerance)?;
        if a.vi_max_iter == 0 {
            return Err(SpecError::new("agent.vi_max_iter", "must be positive"));
        }
        if let Auto::Value(s0) = &a.initial_safe_set {
            if s0.is_empty() {
                return Err(SpecError::new("agent.initial_safe_set", "must be nonempty"));
            }
            if let Auto::Value(st) = &a.start {
                if !s0.contains(st) {
                    return Err(SpecError::new("agent.start", "must be a member of agent.initial_safe_set"));
                }
            }
        }
        Ok(())
    }

    fn load_inputs(mut self) -> Result<LoadedSpec, SpecError> {
        self.normalize();
        self.validate()?;
        let elevation = match &self.environment {
            EnvironmentSpec::Synthetic(_) => None,
            EnvironmentSpec::Elevation(e) => {
                let file = fs::File::open(&e.file).map_err(|err| {
                    SpecError::new("environment.file", format!("cannot open {}: {err}", e.file.display()))
                })?;
                let field = ingest_elevation_grid(BufReader::new(file), e.format, e.cell_size)
                    .map_err(|err| SpecError::new("environment.file", format!("{}: {err}", e.file.display())))?;
                if field.width() < 2 || field.height() < 2 {
                    return Err(SpecError::new("environment.file", "elevation grid must be at least 2x2"));
                }
                Some(field)
            }
        };
        let loaded = LoadedSpec { spec: self, elevation };
        let world = loaded.world();
        let in_grid = |field: &str, [x, y]: [usize; 2]| {
            if world.contains(State::new(x, y)) {
                Ok(())
            } else {
                Err(SpecError::new(field, format!("state ({x}, {y}) is outside the grid")))
            }
        };
        let a = &loaded.spec.agent;
        if let Auto::Value(s) = a.start {
            in_grid("agent.start", s)?;
        }
        if let Auto::Value(s0) = &a.initial_safe_set {
            for &s in s0 {
                in_grid("agent.initial_safe_set", s)?;
            }
        }
        Ok(loaded)
    }
}

impl LoadedSpec {
    pub fn world(&self) -> GridWorld {
        match (&self.spec.environment, &self.elevation) {
            (EnvironmentSpec::Synthetic(s), _) => {
                GridWorld::new(s.width, s.height, s.cell_size).expect("validated dimensions")
            }
            (EnvironmentSpec::Elevation(_), Some(f)) => f.world(),
            (EnvironmentSpec::Elevation(_), None) => unreachable!("elevation loaded with the spec"),
        }
    }

    /// The echoed effective configuration: every default spelled out and
    /// every path absolute.
    pub fn resolved_toml(&self) -> String {
        self.spec.to_toml()
    }

    /// Build the environment and agent for one seed.
    pub fn instance(&self, seed: u64) -> Result<Instance, SpecError> {
        let world = self.world();
        let env = match (&self.spec.environment, &self.elevation) {
            (EnvironmentSpec::Synthetic(s), _) => {
                let mut env = sample_gp_environment(&world, &s.reward_kernel, &s.safety_kernel, seed, s.r_max)
                    .map_err(|e| SpecError::new("environment", e.to_string()))?;
                env.noise = s.noise;
                env
            }
            (EnvironmentSpec::Elevation(e), Some(field)) => {
                let reward = sample_gp_reward(&world, &e.reward_kernel, seed, e.r_max)
                    .map_err(|err| SpecError::new("environment.reward_kernel", err.to_string()))?;
                let safety = slope_safety_from_elevation(field);
                let mut env = EnvironmentTruth::from_fields(&world, reward, safety, e.r_max, e.noise)
                    .map_err(|err| SpecError::new("environment", err.to_string()))?;
                env.seed = seed;
                env
            }
            _ => unreachable!("elevation loaded with the spec"),
        };
        let a = &self.spec.agent;
        let h = a.threshold;
        let lipschitz = match a.lipschitz.value() {
            Some(&l) => l,
            None => lipschitz_constant(&world, &env.safety),
        };
        let start = match a.start.value() {
            Some(&[x, y]) => State::new(x, y),
            None => auto_start(&world, &env, h, seed).ok_or_else(|| {
                SpecError::new(
                    "agent.start",
                    format!("seed {seed}: no state has a truly safe closed neighborhood"),
                )
            })?,
        };
        let initial: Vec<State> = match a.initial_safe_set.value() {
            Some(s0) => s0.iter().map(|&[x, y]| State::new(x, y)).collect(),
            None => world.closed_neighborhood(start),
        };
        if !initial.contains(&start) {
            return Err(SpecError::new(
                "agent.start",
                format!("start {start} is not in the initial safe set"),
            ));
        }
        for &s in &initial {
            if env.safety[world.index(s)] < h {
                return Err(SpecError::new(
                    "agent.initial_safe_set",
                    format!("seed {seed}: state {s} violates the safety threshold"),
                ));
            }
        }
        let config = AgentConfig {
            threshold: h,
            lipschitz,
            discount: a.discount,
            eps_g: a.eps_g,
            alpha: a.alpha,
            beta: a.beta,
            scale_is_squared: a.scale_is_squared,
            stop_mode: StopMode::Classic,
            initial_safe_set: initial,
            start,
            max_steps: a.max_steps,
            seed,
            reward_kernel: a.reward_kernel.expect("normalized"),
            safety_kernel: a.safety_kernel.expect("validated"),
            reward_noise_variance: a.reward_noise_variance,
            safety_noise_variance: a.safety_noise_variance,
            vi_tolerance: a.vi_tolerance,
            vi_max_iter: a.vi_max_iter,
        };
        config
            .validate(&world)
            .map_err(|e| SpecError::new("agent", e.to_string()))?;
        Ok(Instance { world, env, config })
    }
}

/// Seeded uniform choice among states whose closed neighborhood is truly
/// safe.
pub fn auto_start(world: &GridWorld, env: &EnvironmentTruth, threshold: f64, seed: u64) -> Option<State> {
    let candidates: Vec<State> = world
        .states()
        .filter(|&s| {
            world
                .closed_neighborhood(s)
                .iter()
                .all(|&n| env.safety[world.index(n)] >= threshold)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ START_STREAM);
    candidates.choose(&mut rng).copied()
}

/// Result of one (method, seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub log: TrajectoryLog,
    pub snapshot: Option<Vec<crate::agent::SnapshotRow>>,
}

/// Run one method on one instance.
pub fn run_cell(method: Method, instance: &Instance, record_sets: bool) -> Result<CellResult, crate::agent::AgentError> {
    let mut recorder = SnapshotRecorder::new(&instance.world);
    let monitor: &mut dyn Monitor = if record_sets { &mut recorder } else { &mut () };
    let log = run_method(method, &instance.config, &instance.env, &instance.world, monitor)?;
    Ok(CellResult {
        method,
        seed: instance.config.seed,
        log,
        snapshot: record_sets.then_some(recorder.rows),
    })
}

/// Per-method aggregate over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub runs: usize,
    pub mean_normalized: f64,
    pub min_normalized: f64,
    pub max_normalized: f64,
    pub unsafe_actions: usize,
    pub mean_t_transition: Option<f64>,
    pub transitions: usize,
}

/// Cumulative reward of each cell divided by the oracle's on the same seed.
pub fn summarize(cells: &[(Method, u64, &TrajectoryLog)], oracle: &BTreeMap<u64, f64>) -> Vec<SummaryRow> {
    let mut by_method: BTreeMap<Method, Vec<(u64, &TrajectoryLog)>> = BTreeMap::new();
    for &(m, seed, log) in cells {
        by_method.entry(m).or_default().push((seed, log));
    }
    by_method
        .into_iter()
        .map(|(method, runs)| {
            let norm: Vec<f64> = runs
                .iter()
                .map(|(seed, log)| log.summary.cumulative_reward / oracle[seed])
                .collect();
            let tt: Vec<f64> = runs
                .iter()
                .filter_map(|(_, log)| log.summary.t_transition.map(|t| t as f64))
                .collect();
            SummaryRow {
                method,
                runs: runs.len(),
                mean_normalized: norm.iter().sum::<f64>() / norm.len() as f64,
                min_normalized: norm.iter().copied().fold(f64::INFINITY, f64::min),
                max_normalized: norm.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                unsafe_actions: runs.iter().map(|(_, l)| l.summary.unsafe_action_count).sum(),
                mean_t_transition: (!tt.is_empty()).then(|| tt.iter().sum::<f64>() / tt.len() as f64),
                transitions: tt.len(),
            }
        })
        .collect()
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method,runs,mean_normalized_reward,min_normalized_reward,max_normalized_reward,unsafe_actions,mean_t_transition,transitions\n",
    );
    for r in rows {
        let tt = r.mean_t_transition.map_or(String::new(), |t| format!("{t:.2}"));
        out += &format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{}\n",
            r.method, r.runs, r.mean_normalized, r.min_normalized, r.max_normalized, r.unsafe_actions, tt, r.transitions
        );
    }
    out
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("{0}")]
    Collision(String),
    #[error("run {method} seed {seed} aborted: {message}")]
    Aborted { method: Method, seed: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Spec(_) | RunError::Collision(_) => 2,
            RunError::Aborted { .. } | RunError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn cell_stem(method: Method, seed: u64) -> String {
    format!("{method}_seed{seed}")
}

/// Execute every (method, seed) cell and write logs and the summary table
/// into `out_dir`. Returns the summary table text.
pub fn run_experiment(loaded: &LoadedSpec, out_dir: &Path, jobs: usize) -> Result<String, RunError> {
    let spec = &loaded.spec;
    let record = spec.agent.record_sets;
    let instances: Vec<Instance> = spec
        .seeds
        .iter()
        .map(|&s| loaded.instance(s))
        .collect::<Result<_, _>>()?;

    let mut planned: Vec<PathBuf> = vec![out_dir.join("summary.csv")];
    for &seed in &spec.seeds {
        planned.push(out_dir.join(format!("environment_seed{seed}.csv")));
        for &m in &spec.methods {
            let stem = cell_stem(m, seed);
            planned.push(out_dir.join(format!("{stem}.ndjson")));
            if record {
                planned.push(out_dir.join(format!("{stem}.sets.csv")));
            }
        }
    }
    for p in &planned {
        let partial = PathBuf::from(format!("{}.partial", p.display()));
        if p.exists() || partial.exists() {
            return Err(RunError::Collision(format!(
                "output {} already exists; refusing to overwrite",
                p.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for inst in &instances {
        let mut buf = Vec::new();
        inst.env
            .write_snapshot_csv(&inst.world, &mut buf)
            .expect("writing to memory");
        write_new(&out_dir.join(format!("environment_seed{}.csv", inst.config.seed)), &buf)?;
    }

    let mut methods = spec.methods.clone();
    let write_oracle = methods.contains(&Method::Oracle);
    if !write_oracle {
        methods.push(Method::Oracle);
    }
    let cells: Vec<(Method, usize)> = (0..instances.len())
        .flat_map(|i| methods.iter().map(move |&m| (m, i)))
        .collect();
    let execute = |&(m, i): &(Method, usize)| {
        let inst = &instances[i];
        log::info!("running {m} seed {}", inst.config.seed);
        let wanted = m != Method::Oracle || write_oracle;
        let res = run_cell(m, inst, record && wanted);
        if let Ok(cell) = &res {
            log::debug!(
                "{m} seed {}: cumulative {:.4}, unsafe {}",
                inst.config.seed,
                cell.log.summary.cumulative_reward,
                cell.log.summary.unsafe_action_count
            );
        }
        (m, inst.config.seed, res)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<_> = pool.install(|| cells.par_iter().map(execute).collect());

    let mut failure = None;
    let mut done: Vec<CellResult> = Vec::new();
    for (m, seed, res) in results {
        let stem = cell_stem(m, seed);
        let wanted = m != Method::Oracle || write_oracle;
        match res {
            Ok(cell) => {
                if wanted {
                    let partial = out_dir.join(format!("{stem}.ndjson.partial"));
                    write_new(&partial, cell.log.to_ndjson().as_bytes())?;
                    if let Some(rows) = &cell.snapshot {
                        let mut buf = Vec::new();
                        write_snapshot_csv(rows, &mut buf).expect("writing to memory");
                        write_new(&out_dir.join(format!("{stem}.sets.csv")), &buf)?;
                    }
                }
                done.push(cell);
            }
            Err(e) => {
                let header = serde_json::json!({
                    "record": "header", "schema_version": SCHEMA_VERSION, "method": m, "seed": seed,
                });
                let error = serde_json::json!({ "record": "error", "message": e.to_string() });
                write_new(
                    &out_dir.join(format!("{stem}.ndjson.partial")),
                    format!("{header}\n{error}\n").as_bytes(),
                )?;
                failure.get_or_insert(RunError::Aborted {
                    method: m,
                    seed,
                    message: e.to_string(),
                });
            }
        }
    }

    let oracle: BTreeMap<u64, f64> = done
        .iter()
        .filter(|c| c.method == Method::Oracle)
        .map(|c| (c.seed, c.log.summary.cumulative_reward))
        .collect();
    let table_cells: Vec<(Method, u64, &TrajectoryLog)> = done
        .iter()
        .filter(|c| spec.methods.contains(&c.method) && oracle.contains_key(&c.seed))
        .map(|c| (c.method, c.seed, &c.log))
        .collect();
    let table = format_summary(&summarize(&table_cells, &oracle));
    if let Some(err) = failure {
        write_new(&out_dir.join("summary.csv.partial"), table.as_bytes())?;
        return Err(err);
    }
    for c in &done {
        if c.method == Method::Oracle && !write_oracle {
            continue;
        }
        let stem = cell_stem(c.method, c.seed);
        let partial = out_dir.join(format!("{stem}.ndjson.partial"));
        let fin = out_dir.join(format!("{stem}.ndjson"));
        fs::rename(&partial, &fin).map_err(io_err(&fin))?;
    }
    write_new(&out_dir.join("summary.csv"), table.as_bytes())?;
    Ok(table)
}

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Files written by [`plot_data`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub series: Vec<PathBuf>,
    pub transitions: PathBuf,
    pub snapshots: Vec<PathBuf>,
}

/// Turn the logs in `log_dir` into plot-ready CSV files in `out_dir`.
///
/// Each series row carries the trailing average reward divided by the
/// oracle's final trailing average on the same seed.
pub fn plot_data(log_dir: &Path, out_dir: &Path) -> Result<PlotOutput, PlotError> {
    let pio = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PlotError::Io { path, source }
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(log_dir)
        .map_err(pio(log_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut logs = Vec::new();
    let mut snapshots_in = Vec::new();
    for p in &entries {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".ndjson") {
            let file = fs::File::open(p).map_err(pio(p))?;
            let log = TrajectoryLog::read_ndjson(BufReader::new(file)).map_err(|e| PlotError::Malformed {
                path: p.clone(),
                message: e.to_string(),
            })?;
            logs.push(log);
        } else if name.ends_with(".sets.csv") {
            snapshots_in.push(p.clone());
        }
    }
    if logs.is_empty() {
        return Err(PlotError::Missing(format!("no .ndjson logs in {}", log_dir.display())));
    }
    let oracle: BTreeMap<u64, f64> = logs
        .iter()
        .filter(|l| l.header.method == Method::Oracle)
        .map(|l| (l.header.seed, l.summary.final_average_reward))
        .collect();

    let planned_transitions = out_dir.join("transitions.csv");
    let mut planned: Vec<PathBuf> = vec![planned_transitions.clone()];
    for l in &logs {
        planned.push(out_dir.join(format!("{}.series.csv", cell_stem(l.header.method, l.header.seed))));
    }
    for s in &snapshots_in {
        planned.push(out_dir.join(s.file_name().expect("file")));
    }
    for p in &planned {
        if p.exists() {
            return Err(PlotError::Missing(format!("output {} already exists; refusing to overwrite", p.display())));
        }
    }
    fs::create_dir_all(out_dir).map_err(pio(out_dir))?;
    let create = |path: &Path, text: &str| -> Result<(), PlotError> {
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(pio(path))?;
        f.write_all(text.as_bytes()).map_err(pio(path))
    };

    let mut series = Vec::new();
    let mut transitions = String::from("method,seed,t_transition\n");
    for l in &logs {
        let (m, seed) = (l.header.method, l.header.seed);
        let denom = *oracle
            .get(&seed)
            .ok_or_else(|| PlotError::Missing(format!("no oracle log for seed {seed}")))?;
        let mut text = String::from("t,normalized_average_reward,average_reward,pessimistic_size,phase\n");
        for s in &l.steps {
            text += &format!(
                "{},{},{},{},{}\n",
                s.t,
                s.average_reward / denom,
                s.average_reward,
                s.pessimistic_size,
                s.phase
            );
        }
        let path = out_dir.join(format!("{}.series.csv", cell_stem(m, seed)));
        create(&path, &text)?;
        series.push(path);
        let tt = l.summary.t_transition.map_or(String::new(), |t| t.to_string());
        transitions += &format!("{m},{seed},{tt}\n");
    }
    create(&planned_transitions, &transitions)?;
    let mut snapshots = Vec::new();
    for s in &snapshots_in {
        let target = out_dir.join(s.file_name().expect("file"));
        fs::copy(s, &target).map_err(pio(&target))?;
        snapshots.push(target);
    }
    Ok(PlotOutput {
        series,
        transitions: planned_transitions,
        snapshots,
    })
}
