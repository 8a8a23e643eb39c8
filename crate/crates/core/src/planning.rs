//! Bellman solvers over restricted state sets.
//!
//! All value functions in the algorithm share one shape: on an admissible
//! set `A` of states with per-state reward `r`,
//!
//! ```text
//! V(s) = max_{s' = f(s, a) ∈ A} q(s'),   q(s') = p(s') · (r(s') + γ V(s'))
//! ```
//!
//! where `p ≡ 1` unless a survival channel is supplied. With a survival
//! channel this is the value of an MDP that falls into a zero-reward
//! absorbing state with probability `1 − p(s')` on entering `s'`.

use statrs::function::erf::erfc;
use thiserror::Error;

use crate::gp::Beliefs;
use crate::gridworld::{Action, GridWorld};
use crate::safesets::StateSet;

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum PlanningError {
    #[error("discount must lie in [0, 1), got {0}")]
    BadDiscount(f64),
    #[error("survival probability {value} at state {state} is outside [0, 1]")]
    BadSurvival { state: usize, value: f64 },
    #[error("reward at admissible state {0} is not finite")]
    BadReward(usize),
    #[error("value iteration did not converge in {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("no path from {from} to {to} inside the safe set")]
    Disconnected { from: usize, to: usize },
    #[error("state {0} is not in the safe set")]
    NotInSet(usize),
    #[error("the pessimistic set must be nonempty and contained in the optimistic set")]
    BadSets,
}

/// A deterministic MDP restricted to an admissible set of states.
#[derive(Debug, Clone, Copy)]
pub struct MdpView<'a> {
    pub world: &'a GridWorld,
    pub admissible: &'a StateSet,
    pub reward: &'a [f64],
    pub discount: f64,
    pub survival: Option<&'a [f64]>,
}

impl<'a> MdpView<'a> {
    pub fn new(world: &'a GridWorld, admissible: &'a StateSet, reward: &'a [f64], discount: f64) -> Self {
        MdpView {
            world,
            admissible,
            reward,
            discount,
            survival: None,
        }
    }

    pub fn with_survival(mut self, survival: &'a [f64]) -> Self {
        self.survival = Some(survival);
        self
    }

    fn validate(&self) -> Result<(), PlanningError> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(PlanningError::BadDiscount(self.discount));
        }
        for s in self.admissible.iter() {
            if !self.reward[s].is_finite() {
                return Err(PlanningError::BadReward(s));
            }
            if let Some(p) = self.survival {
                if !(0.0..=1.0).contains(&p[s]) {
                    return Err(PlanningError::BadSurvival { state: s, value: p[s] });
                }
            }
        }
        Ok(())
    }

    /// Backed-up value of entering `s` given `value`.
    pub fn q(&self, value: &[f64], s: usize) -> f64 {
        let inner = self.reward[s] + self.discount * value[s];
        match self.survival {
            Some(p) => p[s] * inner,
            None => inner,
        }
    }

    /// Best action from any state `s` (admissible or not) toward an
    /// admissible successor, with its backed-up value. Ties go to the
    /// earlier action in `Action::ALL`.
    pub fn greedy(&self, value: &[f64], s: usize) -> Option<(Action, f64)> {
        let mut best: Option<(Action, f64)> = None;
        for a in Action::ALL {
            let next = self.world.step_index(s, a);
            if !self.admissible.contains(next) {
                continue;
            }
            let q = self.q(value, next);
            if best.is_none_or(|(_, bq)| q > bq) {
                best = Some((a, q));
            }
        }
        best
    }
}

/// Converged value function with its greedy policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    /// Value per state; zero outside the admissible set.
    pub value: Vec<f64>,
    /// Greedy action per admissible state.
    pub policy: Vec<Option<Action>>,
    pub residual: f64,
    pub iterations: usize,
    /// Sup-norm change of every sweep.
    pub deltas: Vec<f64>,
}

/// Synchronous value iteration from `V = 0` until the sup-norm change
/// drops below `tol`.
pub fn value_iteration(view: &MdpView<'_>, tol: f64, max_iter: usize) -> Result<ValueSolution, PlanningError> {
    view.validate()?;
    let n = view.world.num_states();
    let states: Vec<usize> = view.admissible.iter().collect();
    let successors: Vec<Vec<usize>> = states
        .iter()
        .map(|&s| {
            let mut next: Vec<usize> = Action::ALL
                .iter()
                .map(|&a| view.world.step_index(s, a))
                .filter(|&t| view.admissible.contains(t))
                .collect();
            next.dedup();
            next
        })
        .collect();

    let mut value = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut deltas = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        for &s in &states {
            q[s] = view.q(&value, s);
        }
        let mut delta = 0.0f64;
        for (&s, next) in states.iter().zip(&successors) {
            let v = next.iter().map(|&t| q[t]).fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((v - value[s]).abs());
            value[s] = v;
        }
        iterations += 1;
        deltas.push(delta);
        residual = delta;
        if delta < tol {
            break;
        }
    }
    if residual >= tol && !states.is_empty() {
        return Err(PlanningError::NonConvergence { iterations, residual });
    }
    if states.is_empty() {
        residual = 0.0;
    }

    let mut policy = vec![None; n];
    for &s in &states {
        policy[s] = view.greedy(&value, s).map(|(a, _)| a);
    }
    Ok(ValueSolution {
        value,
        policy,
        residual,
        iterations,
        deltas,
    })
}

/// `U(s) = μ(s) + scale·σ(s)`.
pub fn optimistic_reward(beliefs: &Beliefs, scale: f64) -> Vec<f64> {
    beliefs
        .mean
        .iter()
        .zip(&beliefs.std)
        .map(|(m, s)| m + scale * s)
        .collect()
}

/// Auxiliary reward: upper bound on the optimistic frontier `X⁺ ∖ X⁻`, lower
/// bound inside `X⁻`, `NaN` outside `X⁺`.
pub fn es2_auxiliary_reward(
    beliefs: &Beliefs,
    scale: f64,
    pessimistic: &StateSet,
    optimistic: &StateSet,
) -> Vec<f64> {
    (0..beliefs.len())
        .map(|s| {
            let (m, sd) = (beliefs.mean[s], beliefs.std[s]);
            if pessimistic.contains(s) {
                m - scale * sd
            } else if optimistic.contains(s) {
                m + scale * sd
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// `p(s) = P[g(s) ≥ h]` under the safety belief, i.e.
/// `1 − ½ erfc((μ − h) / (√2 σ))`; an indicator when `σ = 0`.
pub fn pes2_survival(beliefs: &Beliefs, threshold: f64) -> Vec<f64> {
    beliefs
        .mean
        .iter()
        .zip(&beliefs.std)
        .map(|(&m, &sd)| {
            if sd > 0.0 {
                (1.0 - 0.5 * erfc((m - threshold) / (std::f64::consts::SQRT_2 * sd))).clamp(0.0, 1.0)
            } else if m >= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Outcome of an early-stopping check.
#[derive(Debug, Clone, PartialEq)]
pub struct StopCheck {
    pub stop: bool,
    /// Image of the pessimistic set under the auxiliary greedy policy.
    pub image: StateSet,
    pub solution: ValueSolution,
}

/// Settings shared by the stop checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub discount: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl SolverSettings {
    pub fn new(discount: f64) -> Self {
        SolverSettings {
            discount,
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

fn stop_check(
    world: &GridWorld,
    pessimistic: &StateSet,
    optimistic: &StateSet,
    reward: &[f64],
    survival: Option<&[f64]>,
    settings: SolverSettings,
) -> Result<StopCheck, PlanningError> {
    if pessimistic.is_empty() || !pessimistic.is_subset(optimistic) {
        return Err(PlanningError::BadSets);
    }
    let mut view = MdpView::new(world, optimistic, reward, settings.discount);
    if let Some(p) = survival {
        view = view.with_survival(p);
    }
    let solution = value_iteration(&view, settings.tolerance, settings.max_iter)?;
    let mut image = StateSet::empty(world.num_states());
    for s in pessimistic.iter() {
        let a = solution.policy[s].expect("stay keeps every admissible state covered");
        image.insert(world.step_index(s, a));
    }
    Ok(StopCheck {
        stop: image.is_subset(pessimistic),
        image,
        solution,
    })
}

/// ES² check: solve the auxiliary MDP on `X⁺` and stop exploring safety when
/// its greedy policy maps every state of `X⁻` back into `X⁻`.
pub fn es2_stop_check(
    world: &GridWorld,
    pessimistic: &StateSet,
    optimistic: &StateSet,
    reward_beliefs: &Beliefs,
    scale: f64,
    settings: SolverSettings,
) -> Result<StopCheck, PlanningError> {
    let reward = es2_auxiliary_reward(reward_beliefs, scale, pessimistic, optimistic);
    stop_check(world, pessimistic, optimistic, &reward, None, settings)
}

/// P-ES² check: as [`es2_stop_check`] with every transition surviving with
/// the probability that its target is truly safe.
#[allow(clippy::too_many_arguments)]
pub fn pes2_stop_check(
    world: &GridWorld,
    pessimistic: &StateSet,
    optimistic: &StateSet,
    reward_beliefs: &Beliefs,
    safety_beliefs: &Beliefs,
    scale: f64,
    threshold: f64,
    settings: SolverSettings,
) -> Result<StopCheck, PlanningError> {
    let survival = pes2_survival(safety_beliefs, threshold);
    pes2_stop_check_with(world, pessimistic, optimistic, reward_beliefs, scale, &survival, settings)
}

/// P-ES² check with an explicit survival vector.
pub fn pes2_stop_check_with(
    world: &GridWorld,
    pessimistic: &StateSet,
    optimistic: &StateSet,
    reward_beliefs: &Beliefs,
    scale: f64,
    survival: &[f64],
    settings: SolverSettings,
) -> Result<StopCheck, PlanningError> {
    let reward = es2_auxiliary_reward(reward_beliefs, scale, pessimistic, optimistic);
    stop_check(world, pessimistic, optimistic, &reward, Some(survival), settings)
}

/// Minimum-hop action sequence from `from` to `to` through `safe`.
pub fn shortest_safe_path(
    world: &GridWorld,
    safe: &StateSet,
    from: usize,
    to: usize,
) -> Result<Vec<Action>, PlanningError> {
    for s in [from, to] {
        if !safe.contains(s) {
            return Err(PlanningError::NotInSet(s));
        }
    }
    if from == to {
        return Ok(Vec::new());
    }
    let n = world.num_states();
    let mut parent: Vec<Option<(usize, Action)>> = vec![None; n];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    seen[from] = true;
    queue.push_back(from);
    while let Some(s) = queue.pop_front() {
        for a in Action::ALL {
            let t = world.step_index(s, a);
            if seen[t] || !safe.contains(t) {
                continue;
            }
            seen[t] = true;
            parent[t] = Some((s, a));
            if t == to {
                let mut path = Vec::new();
                let mut cur = to;
                while let Some((p, act)) = parent[cur] {
                    path.push(act);
                    cur = p;
                }
                path.reverse();
                return Ok(path);
            }
            queue.push_back(t);
        }
    }
    Err(PlanningError::Disconnected { from, to })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n: usize, xs: &[usize]) -> StateSet {
        StateSet::from_indices(n, xs.iter().copied())
    }

    #[test]
    fn single_state_fixed_point() {
        let w = GridWorld::new(1, 1, 1.0).unwrap();
        let a = StateSet::full(1);
        let r = [0.7];
        let sol = value_iteration(&MdpView::new(&w, &a, &r, 0.9), 1e-12, 10_000).unwrap();
        assert!((sol.value[0] - 7.0).abs() < 1e-9);
        assert_eq!(sol.policy[0], Some(Action::Stay));
    }

    #[test]
    fn two_state_chain() {
        let w = GridWorld::new(2, 1, 1.0).unwrap();
        let a = StateSet::full(2);
        let r = [0.0, 1.0];
        let sol = value_iteration(&MdpView::new(&w, &a, &r, 0.9), 1e-12, 10_000).unwrap();
        assert!((sol.value[0] - 10.0).abs() < 1e-9);
        assert!((sol.value[1] - 10.0).abs() < 1e-9);
        assert_eq!(sol.policy[0], Some(Action::Right));
        assert_eq!(sol.policy[1], Some(Action::Stay));
        for pair in sol.deltas.windows(2) {
            assert!(pair[1] <= 0.9 * pair[0] + 1e-12);
        }
    }

    #[test]
    fn zero_survival_kills_value() {
        let w = GridWorld::new(3, 2, 1.0).unwrap();
        let a = StateSet::full(6);
        let r = [1.0; 6];
        let p = [0.0; 6];
        let sol = value_iteration(&MdpView::new(&w, &a, &r, 0.95).with_survival(&p), 1e-9, 100).unwrap();
        assert!(sol.value.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_views() {
        let w = GridWorld::new(2, 1, 1.0).unwrap();
        let a = StateSet::full(2);
        let r = [1.0, 1.0];
        assert_eq!(
            value_iteration(&MdpView::new(&w, &a, &r, 1.0), 1e-6, 10).unwrap_err(),
            PlanningError::BadDiscount(1.0)
        );
        let p = [0.5, 1.5];
        assert!(matches!(
            value_iteration(&MdpView::new(&w, &a, &r, 0.5).with_survival(&p), 1e-6, 10),
            Err(PlanningError::BadSurvival { state: 1, .. })
        ));
        assert!(matches!(
            value_iteration(&MdpView::new(&w, &a, &r, 0.99), 1e-12, 3),
            Err(PlanningError::NonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn optimistic_and_auxiliary_rewards() {
        let b = Beliefs {
            mean: vec![1.0, 1.0, 1.0],
            std: vec![0.5, 0.5, 0.5],
        };
        assert_eq!(optimistic_reward(&b, 3.0), vec![2.5; 3]);
        let flat = Beliefs {
            mean: vec![0.3, 0.4],
            std: vec![0.0, 0.0],
        };
        assert_eq!(optimistic_reward(&flat, 3.0), flat.mean);

        let r = es2_auxiliary_reward(&b, 3.0, &set(3, &[0]), &set(3, &[0, 1]));
        assert_eq!(r[0], -0.5);
        assert_eq!(r[1], 2.5);
        assert!(r[2].is_nan());
        let r = es2_auxiliary_reward(&flat, 3.0, &set(2, &[0]), &set(2, &[0, 1]));
        assert_eq!(r, flat.mean);
    }

    #[test]
    fn survival_probability() {
        let b = Beliefs {
            mean: vec![0.0, 1e6, -1e6, 1.0, 0.5, -0.5],
            std: vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0],
        };
        let p = pes2_survival(&b, 0.0);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert_eq!(p[1], 1.0);
        assert_eq!(p[2], 0.0);
        assert!((p[3] - 0.841_344_746_068_542_9).abs() < 1e-10);
        assert_eq!(p[4], 1.0);
        assert_eq!(p[5], 0.0);
    }

    #[test]
    fn es2_stops_without_frontier() {
        let w = GridWorld::new(3, 3, 1.0).unwrap();
        let x = set(9, &[3, 4, 5]);
        let b = Beliefs {
            mean: vec![0.5; 9],
            std: vec![1.0; 9],
        };
        let c = es2_stop_check(&w, &x, &x, &b, 3.0, SolverSettings::new(0.9)).unwrap();
        assert!(c.stop);
        assert!(c.image.is_subset(&x));
    }

    #[test]
    fn path_examples() {
        let w = GridWorld::new(4, 4, 1.0).unwrap();
        let all = StateSet::full(16);
        assert!(shortest_safe_path(&w, &all, 5, 5).unwrap().is_empty());

        let corridor = set(16, &[0, 1, 2]);
        assert_eq!(
            shortest_safe_path(&w, &corridor, 0, 2).unwrap(),
            vec![Action::Right, Action::Right]
        );

        // L-shape: bottom row then right column
        let l = set(16, &[0, 1, 2, 3, 7, 11, 15]);
        let p = shortest_safe_path(&w, &l, 0, 15).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p, vec![Action::Right, Action::Right, Action::Right, Action::Up, Action::Up, Action::Up]);

        assert_eq!(
            shortest_safe_path(&w, &set(16, &[0, 2]), 0, 2),
            Err(PlanningError::Disconnected { from: 0, to: 2 })
        );
        assert_eq!(shortest_safe_path(&w, &corridor, 0, 5), Err(PlanningError::NotInSet(5)));
    }
}
