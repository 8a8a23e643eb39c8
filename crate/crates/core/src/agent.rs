//! The two-phase safe exploration agent, the SafeMDP baseline and the
//! full-knowledge oracle.
//!
//! Time runs in steps. Step `t` (starting at 1) executes one action and
//! moves the agent into `s_t`; the reward collected at step `t` is `r(s_t)`.
//! `t_transition` is the index of the first reward-optimization step, so a
//! run whose exploration phase took `k` steps has `t_transition = k + 1`.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{ConfidenceSchedule, GpError, GpModel, GreedyInfoGain, Kernel};
use crate::gridworld::{observe, Action, EnvironmentTruth, GridWorld, State};
use crate::planning::{
    es2_stop_check, optimistic_reward, pes2_stop_check, shortest_safe_path, value_iteration, MdpView,
    PlanningError, SolverSettings, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE,
};
use crate::safesets::{expand_safe_set, select_goal, SafeSetState, SafetyIntervals, Side, StateSet};

pub const SCHEMA_VERSION: u32 = 1;
pub const AVERAGE_WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Planning(#[from] PlanningError),
}

/// Which rule ends the safety-exploration phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    Classic,
    Es2,
    Pes2,
}

/// The methods a run can execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SnoMdpClassic,
    SnoMdpEs2,
    SnoMdpPes2,
    Safemdp,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SnoMdpClassic,
        Method::SnoMdpEs2,
        Method::SnoMdpPes2,
        Method::Safemdp,
        Method::Oracle,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            Method::SnoMdpClassic => "sno_mdp_classic",
            Method::SnoMdpEs2 => "sno_mdp_es2",
            Method::SnoMdpPes2 => "sno_mdp_pes2",
            Method::Safemdp => "safemdp",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == name)
    }

    pub const fn stop_mode(self) -> Option<StopMode> {
        match self {
            Method::SnoMdpClassic => Some(StopMode::Classic),
            Method::SnoMdpEs2 => Some(StopMode::Es2),
            Method::SnoMdpPes2 => Some(StopMode::Pes2),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ExploreSafety,
    OptimizeReward,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::ExploreSafety => "explore_safety",
            Phase::OptimizeReward => "optimize_reward",
        })
    }
}

/// Everything an agent run needs besides the world and the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub threshold: f64,
    pub lipschitz: f64,
    pub discount: f64,
    pub eps_g: f64,
    pub alpha: ConfidenceSchedule,
    pub beta: ConfidenceSchedule,
    pub scale_is_squared: bool,
    pub stop_mode: StopMode,
    pub initial_safe_set: Vec<State>,
    pub start: State,
    pub max_steps: usize,
    pub seed: u64,
    pub reward_kernel: Kernel,
    pub safety_kernel: Kernel,
    pub reward_noise_variance: f64,
    pub safety_noise_variance: f64,
    pub vi_tolerance: f64,
    pub vi_max_iter: usize,
}

impl AgentConfig {
    /// Configuration with the fixed `α = 3`, `β = 2` schedules and default
    /// solver settings.
    pub fn new(
        threshold: f64,
        lipschitz: f64,
        initial_safe_set: Vec<State>,
        start: State,
        reward_kernel: Kernel,
        safety_kernel: Kernel,
    ) -> Self {
        AgentConfig {
            threshold,
            lipschitz,
            discount: 0.99,
            eps_g: 0.1,
            alpha: ConfidenceSchedule::Fixed { value: 3.0 },
            beta: ConfidenceSchedule::Fixed { value: 2.0 },
            scale_is_squared: false,
            stop_mode: StopMode::Classic,
            initial_safe_set,
            start,
            max_steps: 2000,
            seed: 0,
            reward_kernel,
            safety_kernel,
            reward_noise_variance: 1e-4,
            safety_noise_variance: 1e-4,
            vi_tolerance: DEFAULT_TOLERANCE,
            vi_max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn validate(&self, world: &GridWorld) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if !self.threshold.is_finite() {
            return bad(format!("threshold must be finite, got {}", self.threshold));
        }
        if !(self.lipschitz >= 0.0) {
            return bad(format!("lipschitz must be nonnegative, got {}", self.lipschitz));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount must be < 1 and >= 0, got {}", self.discount));
        }
        if !(self.eps_g.is_finite() && self.eps_g > 0.0) {
            return bad(format!("eps_g must be positive, got {}", self.eps_g));
        }
        self.alpha.validate()?;
        self.beta.validate()?;
        if self.beta.is_theoretical() && self.safety_noise_variance <= 0.0 {
            return bad("a theoretical beta schedule needs a positive safety noise variance".into());
        }
        if self.alpha.is_theoretical() && self.reward_noise_variance <= 0.0 {
            return bad("a theoretical alpha schedule needs a positive reward noise variance".into());
        }
        self.reward_kernel.validate()?;
        self.safety_kernel.validate()?;
        for v in [self.reward_noise_variance, self.safety_noise_variance] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GpError::BadNoise(v).into());
            }
        }
        if self.initial_safe_set.is_empty() {
            return bad("initial safe set must be nonempty".into());
        }
        for &s in &self.initial_safe_set {
            if !world.contains(s) {
                return bad(format!("initial safe state {s} is outside the grid"));
            }
        }
        if !self.initial_safe_set.contains(&self.start) {
            return bad(format!("start state {} is not in the initial safe set", self.start));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if !(self.vi_tolerance > 0.0) || self.vi_max_iter == 0 {
            return bad("value-iteration tolerance and iteration budget must be positive".into());
        }
        Ok(())
    }

    pub fn initial_set(&self, world: &GridWorld) -> StateSet {
        StateSet::from_indices(
            world.num_states(),
            self.initial_safe_set.iter().map(|&s| world.index(s)),
        )
    }

    fn solver(&self) -> SolverSettings {
        SolverSettings {
            discount: self.discount,
            tolerance: self.vi_tolerance,
            max_iter: self.vi_max_iter,
        }
    }
}

/// One executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub action: Action,
    pub phase: Phase,
    pub true_reward: f64,
    pub true_safety: f64,
    #[serde(rename = "unsafe")]
    pub unsafe_flag: bool,
    pub pessimistic_size: usize,
    pub optimistic_size: usize,
    pub expanders: usize,
    pub max_width: f64,
    pub average_reward: f64,
}

/// End-of-run totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub total_steps: usize,
    pub t_transition: Option<usize>,
    pub discounted_reward: f64,
    pub cumulative_reward: f64,
    pub explore_discounted_reward: f64,
    pub optimize_discounted_reward: f64,
    pub explore_cumulative_reward: f64,
    pub optimize_cumulative_reward: f64,
    pub final_average_reward: f64,
    pub unsafe_action_count: usize,
    pub final_pessimistic_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
}

/// One row of the per-step safe-set snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotRow {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub in_pessimistic: bool,
    pub in_optimistic: bool,
    pub in_expanders: bool,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogRecord {
    Header(LogHeader),
    Step(StepRecord),
    Summary(RunSummary),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl TrajectoryLog {
    /// Newline-delimited JSON: a header record, one record per step and a
    /// closing summary record.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let line = |r: &LogRecord| serde_json::to_string(r).expect("log records serialize");
        writeln!(out, "{}", line(&LogRecord::Header(self.header.clone())))?;
        for s in &self.steps {
            writeln!(out, "{}", line(&LogRecord::Step(s.clone())))?;
        }
        writeln!(out, "{}", line(&LogRecord::Summary(self.summary.clone())))?;
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_ndjson<R: BufRead>(input: R) -> Result<TrajectoryLog, LogError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut summary = None;
        let mut last = 0;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            last = i + 1;
            let err = |message: String| LogError::Parse { line: i + 1, message };
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            match rec {
                LogRecord::Header(h) => {
                    if header.is_some() || !steps.is_empty() || summary.is_some() {
                        return Err(err("header must be the first record".into()));
                    }
                    if h.schema_version != SCHEMA_VERSION {
                        return Err(err(format!("unsupported schema version {}", h.schema_version)));
                    }
                    header = Some(h);
                }
                LogRecord::Step(s) => {
                    if header.is_none() || summary.is_some() {
                        return Err(err("step record outside the header/summary frame".into()));
                    }
                    if s.t != steps.len() + 1 {
                        return Err(err(format!("expected step {}, found {}", steps.len() + 1, s.t)));
                    }
                    steps.push(s);
                }
                LogRecord::Summary(s) => {
                    if header.is_none() || summary.is_some() {
                        return Err(err("unexpected summary record".into()));
                    }
                    summary = Some(s);
                }
            }
        }
        let missing = |what: &str| LogError::Parse {
            line: last,
            message: format!("missing {what} record"),
        };
        Ok(TrajectoryLog {
            header: header.ok_or_else(|| missing("header"))?,
            steps,
            summary: summary.ok_or_else(|| missing("summary"))?,
        })
    }
}

pub fn write_snapshot_csv<W: Write>(rows: &[SnapshotRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "t,x,y,in_X_minus,in_X_plus,in_G,l,u,w")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.x,
            r.y,
            u8::from(r.in_pessimistic),
            u8::from(r.in_optimistic),
            u8::from(r.in_expanders),
            r.lower,
            r.upper,
            r.width
        )?;
    }
    Ok(())
}

/// Hooks for observing a run from the outside.
pub trait Monitor {
    /// Called after every interval and safe-set update.
    fn iteration(&mut self, _t: usize, _iv: &SafetyIntervals, _sets: &SafeSetState) {}
    /// Called after every step with the set the agent is confined to.
    fn step(&mut self, _record: &StepRecord, _state: usize, _admissible: &StateSet) {}
}

impl Monitor for () {}

/// Monitor that materializes the per-step set snapshot.
#[derive(Debug)]
pub struct SnapshotRecorder {
    pub rows: Vec<SnapshotRow>,
    grid_width: usize,
    current: Option<(SafetyIntervals, SafeSetState)>,
}

impl SnapshotRecorder {
    pub fn new(world: &GridWorld) -> Self {
        SnapshotRecorder {
            rows: Vec::new(),
            grid_width: world.width(),
            current: None,
        }
    }
}

impl Monitor for SnapshotRecorder {
    fn iteration(&mut self, _t: usize, iv: &SafetyIntervals, sets: &SafeSetState) {
        self.current = Some((iv.clone(), sets.clone()));
    }

    fn step(&mut self, record: &StepRecord, _state: usize, _admissible: &StateSet) {
        let Some((iv, sets)) = &self.current else { return };
        for s in 0..iv.len() {
            self.rows.push(SnapshotRow {
                t: record.t,
                x: s % self.grid_width,
                y: s / self.grid_width,
                in_pessimistic: sets.pessimistic.contains(s),
                in_optimistic: sets.optimistic.contains(s),
                in_expanders: sets.expanders.contains(s),
                lower: iv.lower[s],
                upper: iv.upper[s],
                width: iv.width(s),
            });
        }
    }
}

/// Running reward bookkeeping shared by all methods.
struct Ledger {
    discount: f64,
    weight: f64,
    window: VecDeque<f64>,
    window_sum: f64,
    steps: Vec<StepRecord>,
    discounted: [f64; 2],
    cumulative: [f64; 2],
    unsafe_count: usize,
}

impl Ledger {
    fn new(discount: f64) -> Self {
        Ledger {
            discount,
            weight: 1.0,
            window: VecDeque::with_capacity(AVERAGE_WINDOW),
            window_sum: 0.0,
            steps: Vec::new(),
            discounted: [0.0; 2],
            cumulative: [0.0; 2],
            unsafe_count: 0,
        }
    }

    fn t(&self) -> usize {
        self.steps.len()
    }

    fn push(&mut self, mut rec: StepRecord) -> &StepRecord {
        let k = match rec.phase {
            Phase::ExploreSafety => 0,
            Phase::OptimizeReward => 1,
        };
        self.discounted[k] += self.weight * rec.true_reward;
        self.cumulative[k] += rec.true_reward;
        self.weight *= self.discount;
        if self.window.len() == AVERAGE_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(rec.true_reward);
        self.window_sum = self.window.iter().sum();
        rec.average_reward = self.window_sum / self.window.len() as f64;
        if rec.unsafe_flag {
            self.unsafe_count += 1;
        }
        self.steps.push(rec);
        self.steps.last().unwrap()
    }

    fn finish(self, method: Method, seed: u64, t_transition: Option<usize>, final_pess: usize) -> TrajectoryLog {
        let final_average_reward = if self.window.is_empty() {
            0.0
        } else {
            self.window_sum / self.window.len() as f64
        };
        TrajectoryLog {
            header: LogHeader {
                schema_version: SCHEMA_VERSION,
                method,
                seed,
            },
            summary: RunSummary {
                method,
                seed,
                total_steps: self.steps.len(),
                t_transition,
                discounted_reward: self.discounted[0] + self.discounted[1],
                cumulative_reward: self.cumulative[0] + self.cumulative[1],
                explore_discounted_reward: self.discounted[0],
                optimize_discounted_reward: self.discounted[1],
                explore_cumulative_reward: self.cumulative[0],
                optimize_cumulative_reward: self.cumulative[1],
                final_average_reward,
                unsafe_action_count: self.unsafe_count,
                final_pessimistic_size: final_pess,
            },
            steps: self.steps,
        }
    }
}

/// Set sizes reported alongside each step.
#[derive(Debug, Clone, Copy)]
struct SetSizes {
    pessimistic: usize,
    optimistic: usize,
    expanders: usize,
    max_width: f64,
}

impl SetSizes {
    fn of(sets: &SafeSetState) -> Self {
        SetSizes {
            pessimistic: sets.pessimistic.len(),
            optimistic: sets.optimistic.len(),
            expanders: sets.expanders.len(),
            max_width: sets.max_expander_width(),
        }
    }
}

struct Runner<'a> {
    world: &'a GridWorld,
    env: &'a EnvironmentTruth,
    cfg: &'a AgentConfig,
    monitor: &'a mut dyn Monitor,
    ledger: Ledger,
    state: usize,
}

impl<'a> Runner<'a> {
    fn new(
        world: &'a GridWorld,
        env: &'a EnvironmentTruth,
        cfg: &'a AgentConfig,
        monitor: &'a mut dyn Monitor,
    ) -> Result<Self, AgentError> {
        cfg.validate(world)?;
        let n = world.num_states();
        if env.reward.len() != n || env.safety.len() != n {
            return Err(AgentError::Config(format!(
                "environment covers {} states, grid has {n}",
                env.reward.len()
            )));
        }
        Ok(Runner {
            world,
            env,
            cfg,
            monitor,
            ledger: Ledger::new(cfg.discount),
            state: world.index(cfg.start),
        })
    }

    fn done(&self) -> bool {
        self.ledger.t() >= self.cfg.max_steps
    }

    fn step(&mut self, a: Action, phase: Phase, sizes: SetSizes, admissible: &StateSet) {
        self.state = self.world.step_index(self.state, a);
        let s = self.world.state(self.state);
        let g = self.env.safety[self.state];
        let rec = StepRecord {
            t: self.ledger.t() + 1,
            x: s.x,
            y: s.y,
            action: a,
            phase,
            true_reward: self.env.reward[self.state],
            true_safety: g,
            unsafe_flag: g < self.cfg.threshold,
            pessimistic_size: sizes.pessimistic,
            optimistic_size: sizes.optimistic,
            expanders: sizes.expanders,
            max_width: sizes.max_width,
            average_reward: 0.0,
        };
        let rec = self.ledger.push(rec);
        self.monitor.step(rec, self.state, admissible);
    }
}

/// GP beliefs and the observation stream of an exploring agent.
struct Learner {
    reward: Option<GpModel>,
    safety: GpModel,
    reward_gain: Option<GreedyInfoGain>,
    safety_gain: Option<GreedyInfoGain>,
    rng: ChaCha8Rng,
}

impl Learner {
    fn new(world: &GridWorld, cfg: &AgentConfig, track_reward: bool) -> Result<Self, AgentError> {
        let points = world.positions();
        let all: Vec<usize> = (0..world.num_states()).collect();
        let reward = if track_reward {
            Some(GpModel::new(cfg.reward_kernel, cfg.reward_noise_variance, points.clone())?)
        } else {
            None
        };
        let safety = GpModel::new(cfg.safety_kernel, cfg.safety_noise_variance, points)?;
        let reward_gain = match &reward {
            Some(m) if cfg.alpha.is_theoretical() => Some(GreedyInfoGain::new(m.clone(), all.clone())?),
            _ => None,
        };
        let safety_gain = if cfg.beta.is_theoretical() {
            Some(GreedyInfoGain::new(safety.clone(), all)?)
        } else {
            None
        };
        Ok(Learner {
            reward,
            safety,
            reward_gain,
            safety_gain,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    fn observe(&mut self, world: &GridWorld, env: &EnvironmentTruth, s: usize) -> Result<(), AgentError> {
        for o in observe(env, world, world.state(s), &mut self.rng) {
            let i = world.index(o.state);
            if let Some(r) = &mut self.reward {
                r.add_observation(i, o.reward_sample)?;
            }
            self.safety.add_observation(i, o.safety_sample)?;
        }
        Ok(())
    }

    fn beta(&mut self, cfg: &AgentConfig, t: usize) -> Result<f64, AgentError> {
        let gamma = match &mut self.safety_gain {
            Some(g) => g.gamma(self.safety.num_observations()),
            None => 0.0,
        };
        Ok(cfg.beta.multiplier(t, gamma, cfg.scale_is_squared)?)
    }

    fn alpha(&mut self, cfg: &AgentConfig, t: usize) -> Result<f64, AgentError> {
        let n = self.reward.as_ref().map_or(0, GpModel::num_observations);
        let gamma = match &mut self.reward_gain {
            Some(g) => g.gamma(n),
            None => 0.0,
        };
        Ok(cfg.alpha.multiplier(t, gamma, cfg.scale_is_squared)?)
    }
}

/// Exploration-phase outcome: the set the agent is confined to afterward.
enum Exploration {
    Finished { admissible: StateSet },
    OutOfSteps,
}

/// Re-apply the set update under unchanged intervals until the sets stop
/// growing. Returns whether anything changed.
fn settle(run: &mut Runner<'_>, iv: &SafetyIntervals, sets: &mut SafeSetState, t: usize) -> bool {
    let mut changed = false;
    loop {
        let next = sets.update(run.world, iv, run.cfg.lipschitz);
        if next == *sets {
            return changed;
        }
        *sets = next;
        changed = true;
        run.monitor.iteration(t, iv, sets);
    }
}

fn explore(
    run: &mut Runner<'_>,
    beliefs: &mut Learner,
    iv: &mut SafetyIntervals,
    sets: &mut SafeSetState,
    stop_mode: Option<StopMode>,
) -> Result<Exploration, AgentError> {
    let cfg = run.cfg;
    let world = run.world;
    beliefs.observe(world, run.env, run.state)?;
    loop {
        if run.done() {
            return Ok(Exploration::OutOfSteps);
        }
        let t = run.ledger.t() + 1;
        let beta = beliefs.beta(cfg, t)?;
        iv.update(&beliefs.safety.beliefs(), beta);
        *sets = sets.update(world, iv, cfg.lipschitz);
        run.monitor.iteration(t, iv, sets);

        let mut next_goal = select_goal(&sets.expanders, &sets.widths);
        if next_goal.is_none() && settle(run, iv, sets, t) {
            next_goal = select_goal(&sets.expanders, &sets.widths);
        }

        let goal = match next_goal {
            Some(g) => g,
            None => match stop_mode {
                Some(_) => {
                    return Ok(Exploration::Finished {
                        admissible: sets.pessimistic.clone(),
                    })
                }
                None => select_goal(&sets.pessimistic, &sets.widths).expect("pessimistic set is nonempty"),
            },
        };
        let mut path = shortest_safe_path(world, &sets.pessimistic, run.state, goal)?;
        if path.is_empty() {
            path.push(Action::Stay);
        }
        let sizes = SetSizes::of(sets);
        for a in path {
            if run.done() {
                return Ok(Exploration::OutOfSteps);
            }
            run.step(a, Phase::ExploreSafety, sizes, &sets.pessimistic);
            beliefs.observe(world, run.env, run.state)?;
        }

        let Some(mode) = stop_mode else { continue };
        let alpha_t = run.ledger.t() + 1;
        match mode {
            StopMode::Classic => {}
            StopMode::Es2 | StopMode::Pes2 => {
                let alpha = beliefs.alpha(cfg, alpha_t)?;
                let reward = beliefs.reward.as_ref().expect("reward beliefs tracked").beliefs();
                let check = if mode == StopMode::Es2 {
                    es2_stop_check(world, &sets.pessimistic, &sets.optimistic, &reward, alpha, cfg.solver())?
                } else {
                    pes2_stop_check(
                        world,
                        &sets.pessimistic,
                        &sets.optimistic,
                        &reward,
                        &beliefs.safety.beliefs(),
                        alpha,
                        cfg.threshold,
                        cfg.solver(),
                    )?
                };
                if check.stop {
                    return Ok(Exploration::Finished { admissible: check.image });
                }
            }
        }
        if sets.max_expander_width() < cfg.eps_g && !settle(run, iv, sets, t) {
            return Ok(Exploration::Finished {
                admissible: sets.pessimistic.clone(),
            });
        }
    }
}

/// Two-phase agent with the stop rule of `cfg.stop_mode`.
pub fn run_sno_mdp(cfg: &AgentConfig, env: &EnvironmentTruth, world: &GridWorld) -> Result<TrajectoryLog, AgentError> {
    run_sno_mdp_monitored(cfg, env, world, &mut ())
}

pub fn run_sno_mdp_monitored(
    cfg: &AgentConfig,
    env: &EnvironmentTruth,
    world: &GridWorld,
    monitor: &mut dyn Monitor,
) -> Result<TrajectoryLog, AgentError> {
    let method = match cfg.stop_mode {
        StopMode::Classic => Method::SnoMdpClassic,
        StopMode::Es2 => Method::SnoMdpEs2,
        StopMode::Pes2 => Method::SnoMdpPes2,
    };
    let mut run = Runner::new(world, env, cfg, monitor)?;
    let mut beliefs = Learner::new(world, cfg, true)?;
    let s0 = cfg.initial_set(world);
    let mut iv = SafetyIntervals::new(s0.clone(), cfg.threshold);
    let mut sets = SafeSetState::initial(&s0);

    let admissible = match explore(&mut run, &mut beliefs, &mut iv, &mut sets, Some(cfg.stop_mode))? {
        Exploration::OutOfSteps => {
            let pess = sets.pessimistic.len();
            return Ok(run.ledger.finish(method, cfg.seed, None, pess));
        }
        Exploration::Finished { admissible } => admissible,
    };
    let t_transition = run.ledger.t() + 1;
    let alpha = beliefs.alpha(cfg, t_transition)?;
    let reward = optimistic_reward(&beliefs.reward.as_ref().expect("tracked").beliefs(), alpha);
    let view = MdpView::new(world, &admissible, &reward, cfg.discount);
    let sol = value_iteration(&view, cfg.vi_tolerance, cfg.vi_max_iter)?;
    let sizes = SetSizes::of(&sets);
    while !run.done() {
        let (a, _) = view
            .greedy(&sol.value, run.state)
            .expect("every exploration outcome keeps an admissible successor");
        run.step(a, Phase::OptimizeReward, sizes, &admissible);
    }
    let pess = sets.pessimistic.len();
    Ok(run.ledger.finish(method, cfg.seed, Some(t_transition), pess))
}

/// Safe exploration without reward optimization. When no expanders remain
/// the agent keeps sampling the widest state of the pessimistic set.
pub fn run_safemdp_baseline(
    cfg: &AgentConfig,
    env: &EnvironmentTruth,
    world: &GridWorld,
) -> Result<TrajectoryLog, AgentError> {
    run_safemdp_monitored(cfg, env, world, &mut ())
}

pub fn run_safemdp_monitored(
    cfg: &AgentConfig,
    env: &EnvironmentTruth,
    world: &GridWorld,
    monitor: &mut dyn Monitor,
) -> Result<TrajectoryLog, AgentError> {
    let mut run = Runner::new(world, env, cfg, monitor)?;
    let mut beliefs = Learner::new(world, cfg, false)?;
    let s0 = cfg.initial_set(world);
    let mut iv = SafetyIntervals::new(s0.clone(), cfg.threshold);
    let mut sets = SafeSetState::initial(&s0);
    explore(&mut run, &mut beliefs, &mut iv, &mut sets, None)?;
    let pess = sets.pessimistic.len();
    Ok(run.ledger.finish(Method::Safemdp, cfg.seed, None, pess))
}

/// Largest set reachable from `initial` by repeatedly applying the safe-set
/// operators with the true safety function in place of confidence bounds.
pub fn oracle_safe_set(
    world: &GridWorld,
    safety: &[f64],
    initial: &StateSet,
    threshold: f64,
    lipschitz: f64,
) -> StateSet {
    let iv = SafetyIntervals {
        lower: safety.to_vec(),
        upper: safety.to_vec(),
        initial: initial.clone(),
        threshold,
    };
    let mut set = initial.clone();
    loop {
        let (_, next) = expand_safe_set(world, &iv, &set, lipschitz, Side::Pessimistic);
        if next == set {
            return set;
        }
        set = next;
    }
}

/// Plans on the true reward over [`oracle_safe_set`] and acts greedily.
pub fn run_oracle(cfg: &AgentConfig, env: &EnvironmentTruth, world: &GridWorld) -> Result<TrajectoryLog, AgentError> {
    run_oracle_monitored(cfg, env, world, &mut ())
}

pub fn run_oracle_monitored(
    cfg: &AgentConfig,
    env: &EnvironmentTruth,
    world: &GridWorld,
    monitor: &mut dyn Monitor,
) -> Result<TrajectoryLog, AgentError> {
    let mut run = Runner::new(world, env, cfg, monitor)?;
    let s0 = cfg.initial_set(world);
    let safe = oracle_safe_set(world, &env.safety, &s0, cfg.threshold, cfg.lipschitz);
    let iv = SafetyIntervals {
        lower: env.safety.clone(),
        upper: env.safety.clone(),
        initial: s0,
        threshold: cfg.threshold,
    };
    let sets = SafeSetState {
        pessimistic: safe.clone(),
        optimistic: safe.clone(),
        pess_candidates: safe.clone(),
        opt_candidates: safe.clone(),
        expanders: StateSet::empty(world.num_states()),
        widths: vec![0.0; world.num_states()],
    };
    run.monitor.iteration(1, &iv, &sets);
    let view = MdpView::new(world, &safe, &env.reward, cfg.discount);
    let sol = value_iteration(&view, cfg.vi_tolerance, cfg.vi_max_iter)?;
    let sizes = SetSizes::of(&sets);
    while !run.done() {
        let (a, _) = view.greedy(&sol.value, run.state).expect("stay is admissible");
        run.step(a, Phase::OptimizeReward, sizes, &safe);
    }
    Ok(run.ledger.finish(Method::Oracle, cfg.seed, Some(1), safe.len()))
}

/// Dispatch on `method`, overriding the stop mode for the agent variants.
pub fn run_method(
    method: Method,
    cfg: &AgentConfig,
    env: &EnvironmentTruth,
    world: &GridWorld,
    monitor: &mut dyn Monitor,
) -> Result<TrajectoryLog, AgentError> {
    match method.stop_mode() {
        Some(mode) => {
            let cfg = AgentConfig {
                stop_mode: mode,
                ..cfg.clone()
            };
            run_sno_mdp_monitored(&cfg, env, world, monitor)
        }
        None if method == Method::Safemdp => run_safemdp_monitored(cfg, env, world, monitor),
        None => run_oracle_monitored(cfg, env, world, monitor),
    }
}
