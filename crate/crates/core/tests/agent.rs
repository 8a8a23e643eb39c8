use std::path::Path;

use snomdp::agent::{
    run_method, run_oracle, run_safemdp_baseline, run_sno_mdp, AgentConfig, Method, Monitor, Phase, StepRecord,
    StopMode, TrajectoryLog,
};
use snomdp::experiment::ExperimentSpec;
use snomdp::gp::{Kernel, KernelFamily};
use snomdp::gridworld::{lipschitz_constant, EnvironmentTruth, GridWorld, ObservationNoise, State};
use snomdp::safesets::StateSet;

fn rbf() -> Kernel {
    Kernel::new(KernelFamily::Rbf, 2.0, 1.0).unwrap()
}

fn flat_world(w: usize, h: usize, reward: f64, safety: f64) -> (GridWorld, EnvironmentTruth) {
    let world = GridWorld::new(w, h, 1.0).unwrap();
    let n = world.num_states();
    let env =
        EnvironmentTruth::from_fields(&world, vec![reward; n], vec![safety; n], 1.0, ObservationNoise::default())
            .unwrap();
    (world, env)
}

fn config(s0: Vec<State>, start: State, lipschitz: f64) -> AgentConfig {
    let mut cfg = AgentConfig::new(-1.0, lipschitz, s0, start, rbf(), rbf());
    cfg.max_steps = 300;
    cfg
}

fn check_log_invariants(log: &TrajectoryLog, threshold: f64) {
    let unsafe_count = log.steps.iter().filter(|s| s.unsafe_flag).count();
    assert_eq!(unsafe_count, log.summary.unsafe_action_count);
    for (i, s) in log.steps.iter().enumerate() {
        assert_eq!(s.t, i + 1);
        assert_eq!(s.unsafe_flag, s.true_safety < threshold);
        let expected = match log.summary.t_transition {
            Some(tt) if s.t >= tt => Phase::OptimizeReward,
            _ => Phase::ExploreSafety,
        };
        assert_eq!(s.phase, expected, "t={}", s.t);
    }
    if let Some(tt) = log.summary.t_transition {
        assert!(tt <= log.summary.total_steps);
    }
    assert_eq!(log.summary.total_steps, log.steps.len());
}

#[test]
fn flat_safe_world_is_fully_explored_then_the_agent_settles() {
    let (world, env) = flat_world(5, 5, 0.5, 0.0);
    let start = State::new(2, 2);
    for lipschitz in [0.1, 0.9] {
        let cfg = config(vec![start], start, lipschitz);
        flat_run(&world, &env, &cfg);
    }
}

fn flat_run(world: &GridWorld, env: &EnvironmentTruth, cfg: &AgentConfig) {
    let log = run_sno_mdp(cfg, env, world).unwrap();
    check_log_invariants(&log, cfg.threshold);
    assert_eq!(log.summary.unsafe_action_count, 0);
    assert!(log.summary.t_transition.is_some());
    assert_eq!(log.summary.final_pessimistic_size, world.num_states());
    let tail: Vec<(usize, usize)> = log.steps[log.steps.len() - 20..].iter().map(|s| (s.x, s.y)).collect();
    assert!(tail.windows(2).all(|w| w[0] == w[1]), "agent keeps moving: {tail:?}");
}

#[test]
fn es2_stops_at_once_when_nothing_is_optimistic() {
    let (world, env) = flat_world(3, 3, 0.5, 0.0);
    let s0: Vec<State> = world.states().collect();
    let mut cfg = config(s0, State::new(1, 1), 0.1);
    cfg.stop_mode = StopMode::Es2;
    let log = run_sno_mdp(&cfg, &env, &world).unwrap();
    assert_eq!(log.summary.t_transition, Some(1));
    check_log_invariants(&log, cfg.threshold);
}

#[test]
fn safemdp_pessimistic_set_never_shrinks() {
    let (world, env) = flat_world(6, 6, 0.5, 0.0);
    let start = State::new(0, 0);
    let mut cfg = config(vec![start], start, 0.2);
    cfg.max_steps = 100;
    let log = run_safemdp_baseline(&cfg, &env, &world).unwrap();
    check_log_invariants(&log, cfg.threshold);
    assert_eq!(log.summary.t_transition, None);
    assert!(log.steps.windows(2).all(|w| w[0].pessimistic_size <= w[1].pessimistic_size));
    assert_eq!(log.summary.unsafe_action_count, 0);
}

#[test]
fn oracle_at_the_best_state_stays() {
    let world = GridWorld::new(4, 4, 1.0).unwrap();
    let n = world.num_states();
    let mut reward = vec![0.3; n];
    let best = State::new(1, 2);
    reward[world.index(best)] = 1.0;
    let env = EnvironmentTruth::from_fields(&world, reward, vec![0.0; n], 1.0, ObservationNoise::default()).unwrap();
    let cfg = config(world.closed_neighborhood(best), best, 0.1);
    let log = run_oracle(&cfg, &env, &world).unwrap();
    assert!(log.steps.iter().all(|s| (s.x, s.y) == (1, 2) && s.true_reward == 1.0));
    assert_eq!(log.summary.cumulative_reward, cfg.max_steps as f64);
}

#[test]
fn oracle_is_confined_when_only_the_initial_set_is_safe() {
    let world = GridWorld::new(5, 5, 1.0).unwrap();
    let n = world.num_states();
    let start = State::new(2, 2);
    let s0 = world.closed_neighborhood(start);
    let s0_idx = StateSet::from_indices(n, s0.iter().map(|&s| world.index(s)));
    let safety: Vec<f64> = (0..n).map(|i| if s0_idx.contains(i) { 0.0 } else { -5.0 }).collect();
    let reward: Vec<f64> = (0..n).map(|i| 0.1 + 0.9 * (i as f64) / (n as f64)).collect();
    let env = EnvironmentTruth::from_fields(&world, reward, safety, 1.0, ObservationNoise::default()).unwrap();
    let cfg = config(s0, start, lipschitz_constant(&world, &env.safety));
    let log = run_oracle(&cfg, &env, &world).unwrap();
    assert!(log.steps.iter().all(|s| s0_idx.contains(world.index(State::new(s.x, s.y)))));
}

#[test]
fn runs_are_deterministic_and_logs_round_trip() {
    let spec = ExperimentSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic.toml"))
        .unwrap();
    let inst = spec.instance(7).unwrap();
    for m in [Method::SnoMdpPes2, Method::Oracle] {
        let a = run_method(m, &inst.config, &inst.env, &inst.world, &mut ()).unwrap();
        let b = run_method(m, &inst.config, &inst.env, &inst.world, &mut ()).unwrap();
        let text = a.to_ndjson();
        assert_eq!(text, b.to_ndjson());
        let back = TrajectoryLog::read_ndjson(text.as_bytes()).unwrap();
        assert_eq!(back.to_ndjson(), text);
    }
}

/// Records the admissible set and state of every Phase-2 step.
#[derive(Default)]
struct PhaseTwo {
    violations: usize,
    steps: usize,
}

impl Monitor for PhaseTwo {
    fn step(&mut self, record: &StepRecord, state: usize, admissible: &StateSet) {
        if record.phase == Phase::OptimizeReward {
            self.steps += 1;
            self.violations += usize::from(!admissible.contains(state));
        }
    }
}

#[test]
fn synthetic_runs_are_safe_and_stay_admissible() {
    let spec = ExperimentSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic.toml"))
        .unwrap();
    for seed in 0..10 {
        let inst = spec.instance(seed).unwrap();
        let mut oracle_reward = f64::NAN;
        for m in [Method::Oracle, Method::SnoMdpClassic, Method::SnoMdpEs2, Method::SnoMdpPes2] {
            let mut monitor = PhaseTwo::default();
            let log = run_method(m, &inst.config, &inst.env, &inst.world, &mut monitor).unwrap();
            check_log_invariants(&log, inst.config.threshold);
            assert_eq!(log.summary.unsafe_action_count, 0, "{m} seed {seed}");
            assert_eq!(monitor.violations, 0, "{m} seed {seed}");
            if m == Method::Oracle {
                oracle_reward = log.summary.discounted_reward;
            } else {
                assert!(log.summary.discounted_reward <= oracle_reward + 1e-9, "{m} seed {seed}");
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (world, env) = flat_world(3, 3, 0.5, 0.0);
    let mut cfg = config(vec![State::new(0, 0)], State::new(1, 1), 0.1);
    assert!(run_sno_mdp(&cfg, &env, &world).is_err());
    cfg.start = State::new(0, 0);
    cfg.discount = 1.0;
    let err = run_sno_mdp(&cfg, &env, &world).unwrap_err();
    assert!(err.to_string().contains("discount must be < 1"), "{err}");
}
