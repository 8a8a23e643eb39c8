//! Confidence intervals on the safety function and the safe sets built
//! from them.
//!
//! Every set here is a [`StateSet`] over the linear state indices of a
//! [`GridWorld`]. The pessimistic side uses lower confidence bounds and
//! contains states believed safe with high probability; the optimistic side
//! uses upper bounds and contains every state that might still be safe.

use std::fmt;

use crate::gp::Beliefs;
use crate::gridworld::{Action, GridWorld};

/// Finite stand-in for an unbounded interval end.
pub const SENTINEL: f64 = 1e12;

/// A subset of the states of a fixed-size grid.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct StateSet {
    members: Vec<bool>,
    count: usize,
}

impl StateSet {
    pub fn empty(domain: usize) -> Self {
        StateSet {
            members: vec![false; domain],
            count: 0,
        }
    }

    pub fn full(domain: usize) -> Self {
        StateSet {
            members: vec![true; domain],
            count: domain,
        }
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(domain: usize, indices: I) -> Self {
        let mut s = StateSet::empty(domain);
        for i in indices {
            s.insert(i);
        }
        s
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        let count = mask.iter().filter(|&&b| b).count();
        StateSet { members: mask, count }
    }

    pub fn domain(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members[i]
    }

    pub fn insert(&mut self, i: usize) -> bool {
        let fresh = !self.members[i];
        if fresh {
            self.members[i] = true;
            self.count += 1;
        }
        fresh
    }

    pub fn remove(&mut self, i: usize) -> bool {
        let present = self.members[i];
        if present {
            self.members[i] = false;
            self.count -= 1;
        }
        present
    }

    /// Member indices in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn is_subset(&self, other: &StateSet) -> bool {
        self.iter().all(|i| other.contains(i))
    }

    pub fn union(&self, other: &StateSet) -> StateSet {
        StateSet::from_mask(self.members.iter().zip(&other.members).map(|(a, b)| *a || *b).collect())
    }

    pub fn intersection(&self, other: &StateSet) -> StateSet {
        StateSet::from_mask(self.members.iter().zip(&other.members).map(|(a, b)| *a && *b).collect())
    }

    pub fn difference(&self, other: &StateSet) -> StateSet {
        StateSet::from_mask(self.members.iter().zip(&other.members).map(|(a, b)| *a && !*b).collect())
    }

    pub fn as_mask(&self) -> &[bool] {
        &self.members
    }
}

impl fmt::Debug for StateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Per-state confidence intervals `C_t(s) = [l_t(s), u_t(s)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyIntervals {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub initial: StateSet,
    pub threshold: f64,
}

impl SafetyIntervals {
    /// `C_0`: `[h, ∞)` on the initial safe set, `(−∞, ∞)` elsewhere.
    pub fn new(initial: StateSet, threshold: f64) -> Self {
        let n = initial.domain();
        let lower = (0..n)
            .map(|i| if initial.contains(i) { threshold } else { -SENTINEL })
            .collect();
        SafetyIntervals {
            lower,
            upper: vec![SENTINEL; n],
            initial,
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// Intersect every interval with `[μ − scale·σ, μ + scale·σ]`.
    ///
    /// When the new interval is disjoint from the current one, the current
    /// interval collapses onto its endpoint nearest to the new one, so `l ≤ u`
    /// and monotone contraction both hold.
    pub fn update(&mut self, beliefs: &Beliefs, scale: f64) {
        assert_eq!(beliefs.len(), self.len(), "beliefs must cover every state");
        for i in 0..self.len() {
            let q_lo = beliefs.mean[i] - scale * beliefs.std[i];
            let q_hi = beliefs.mean[i] + scale * beliefs.std[i];
            let (l, u) = (self.lower[i], self.upper[i]);
            if q_hi < l {
                self.upper[i] = l;
            } else if q_lo > u {
                self.lower[i] = u;
            } else {
                self.lower[i] = l.max(q_lo);
                self.upper[i] = u.min(q_hi);
            }
        }
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn widths(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.width(i)).collect()
    }

    pub fn bound(&self, bound: Bound) -> &[f64] {
        match bound {
            Bound::Lower => &self.lower,
            Bound::Upper => &self.upper,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Pessimistic,
    Optimistic,
}

impl Side {
    pub fn bound(self) -> Bound {
        match self {
            Side::Pessimistic => Bound::Lower,
            Side::Optimistic => Bound::Upper,
        }
    }
}

/// `{s | ∃ s' ∈ base: bound(s') − L·d(s, s') ≥ h} ∪ base`.
pub fn candidate_set(
    world: &GridWorld,
    iv: &SafetyIntervals,
    base: &StateSet,
    bound: Bound,
    lipschitz: f64,
) -> StateSet {
    let b = iv.bound(bound);
    let h = iv.threshold;
    let certifiers: Vec<usize> = base.iter().filter(|&s| b[s] >= h).collect();
    let mut out = base.clone();
    for s in 0..world.num_states() {
        if out.contains(s) {
            continue;
        }
        if certifiers
            .iter()
            .any(|&c| b[c] - lipschitz * world.distance(s, c) >= h)
        {
            out.insert(s);
        }
    }
    out
}

/// States reachable from `set` in at most one step.
pub fn reachable_set(world: &GridWorld, set: &StateSet) -> StateSet {
    let mut out = set.clone();
    for s in set.iter() {
        for a in Action::ALL {
            out.insert(world.step_index(s, a));
        }
    }
    out
}

/// Least fixed point of `R ↦ target ∪ {s ∈ through | ∃a: f(s, a) ∈ R}`:
/// states that can reach `target` along a path inside `through`.
pub fn returnable_set(world: &GridWorld, through: &StateSet, target: &StateSet) -> StateSet {
    let mut out = target.clone();
    loop {
        let mut grew = false;
        for s in through.iter() {
            if out.contains(s) {
                continue;
            }
            if Action::ALL.iter().any(|&a| out.contains(world.step_index(s, a))) {
                out.insert(s);
                grew = true;
            }
        }
        if !grew {
            return out;
        }
    }
}

/// One expansion of a safe set: returns the candidate set `S_t` and the new
/// safe set `X_t = S_t ∩ R_reach(X_{t−1}) ∩ R̄_ret(S_t, X_{t−1})`.
pub fn expand_safe_set(
    world: &GridWorld,
    iv: &SafetyIntervals,
    prev: &StateSet,
    lipschitz: f64,
    side: Side,
) -> (StateSet, StateSet) {
    let candidates = candidate_set(world, iv, prev, side.bound(), lipschitz);
    let reach = reachable_set(world, prev);
    let ret = returnable_set(world, &candidates, prev);
    let set = candidates.intersection(&reach).intersection(&ret);
    (candidates, set)
}

/// Expander set `G_t` with the per-state counts `e_t` and widths `w_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expanders {
    pub set: StateSet,
    pub counts: Vec<usize>,
    pub widths: Vec<f64>,
}

/// States of `safe` whose upper bound could certify at least one state
/// outside `candidates`.
pub fn expanders(
    world: &GridWorld,
    iv: &SafetyIntervals,
    safe: &StateSet,
    candidates: &StateSet,
    lipschitz: f64,
) -> Expanders {
    let n = world.num_states();
    let outside: Vec<usize> = (0..n).filter(|&s| !candidates.contains(s)).collect();
    let mut counts = vec![0; n];
    let mut set = StateSet::empty(n);
    for s in safe.iter() {
        let u = iv.upper[s];
        let e = outside
            .iter()
            .filter(|&&o| u - lipschitz * world.distance(s, o) >= iv.threshold)
            .count();
        counts[s] = e;
        if e > 0 {
            set.insert(s);
        }
    }
    Expanders {
        set,
        counts,
        widths: iv.widths(),
    }
}

/// `argmax_{s ∈ G} w(s)`, ties to the smallest index. `None` when `G` is
/// empty.
pub fn select_goal(set: &StateSet, widths: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for s in set.iter() {
        if best.is_none_or(|b| widths[s] > widths[b]) {
            best = Some(s);
        }
    }
    best
}

/// Pessimistic and optimistic safe sets with their candidate sets and the
/// current expanders.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSetState {
    pub pessimistic: StateSet,
    pub optimistic: StateSet,
    pub pess_candidates: StateSet,
    pub opt_candidates: StateSet,
    pub expanders: StateSet,
    pub widths: Vec<f64>,
}

impl SafeSetState {
    pub fn initial(s0: &StateSet) -> Self {
        SafeSetState {
            pessimistic: s0.clone(),
            optimistic: s0.clone(),
            pess_candidates: s0.clone(),
            opt_candidates: s0.clone(),
            expanders: StateSet::empty(s0.domain()),
            widths: vec![0.0; s0.domain()],
        }
    }

    /// Expand both sides from the current sets and recompute the expanders.
    pub fn update(&self, world: &GridWorld, iv: &SafetyIntervals, lipschitz: f64) -> SafeSetState {
        let (pess_candidates, pessimistic) =
            expand_safe_set(world, iv, &self.pessimistic, lipschitz, Side::Pessimistic);
        let (opt_candidates, optimistic) =
            expand_safe_set(world, iv, &self.optimistic, lipschitz, Side::Optimistic);
        let ex = expanders(world, iv, &pessimistic, &pess_candidates, lipschitz);
        SafeSetState {
            pessimistic,
            optimistic,
            pess_candidates,
            opt_candidates,
            expanders: ex.set,
            widths: ex.widths,
        }
    }

    /// Largest width over the expanders, zero when there are none.
    pub fn max_expander_width(&self) -> f64 {
        self.expanders
            .iter()
            .map(|s| self.widths[s])
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::State;

    fn set(n: usize, xs: &[usize]) -> StateSet {
        StateSet::from_indices(n, xs.iter().copied())
    }

    #[test]
    fn interval_updates() {
        let mut iv = SafetyIntervals::new(StateSet::empty(1), 0.0);
        let b = Beliefs {
            mean: vec![5.0],
            std: vec![3.0],
        };
        iv.update(&b, 0.0);
        assert_eq!((iv.lower[0], iv.upper[0]), (5.0, 5.0));

        let mut iv = SafetyIntervals::new(StateSet::empty(1), 0.0);
        let b = Beliefs {
            mean: vec![1.0],
            std: vec![0.5],
        };
        iv.update(&b, 2.0);
        let snapshot = iv.clone();
        iv.update(&b, 2.0);
        assert_eq!(iv, snapshot);

        let mut iv = SafetyIntervals::new(StateSet::empty(1), 0.0);
        iv.lower[0] = 0.0;
        iv.upper[0] = 2.5;
        iv.update(
            &Beliefs {
                mean: vec![1.0],
                std: vec![1.0],
            },
            2.0,
        );
        assert_eq!((iv.lower[0], iv.upper[0]), (0.0, 2.5));
    }

    #[test]
    fn initial_intervals_pin_s0() {
        let iv = SafetyIntervals::new(set(3, &[1]), -0.5);
        assert_eq!(iv.lower, vec![-SENTINEL, -0.5, -SENTINEL]);
        assert_eq!(iv.upper, vec![SENTINEL; 3]);
        let mut iv = iv;
        iv.update(
            &Beliefs {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            },
            2.0,
        );
        assert_eq!(iv.lower[1], -0.5);
        assert_eq!(iv.upper[1], 2.0);
    }

    #[test]
    fn disjoint_evidence_collapses_to_nearest_endpoint() {
        let mut iv = SafetyIntervals::new(set(2, &[0]), 1.0);
        iv.update(
            &Beliefs {
                mean: vec![0.0, 0.0],
                std: vec![0.1, 1.0],
            },
            2.0,
        );
        assert_eq!((iv.lower[0], iv.upper[0]), (1.0, 1.0));
        assert_eq!((iv.lower[1], iv.upper[1]), (-2.0, 2.0));
        iv.update(
            &Beliefs {
                mean: vec![5.0, 5.0],
                std: vec![0.1, 0.1],
            },
            2.0,
        );
        assert_eq!((iv.lower[0], iv.upper[0]), (1.0, 1.0));
        assert_eq!((iv.lower[1], iv.upper[1]), (2.0, 2.0));
    }

    #[test]
    fn candidate_examples() {
        let w = GridWorld::new(5, 1, 1.0).unwrap();
        let mut iv = SafetyIntervals::new(set(5, &[0]), 0.0);
        iv.lower[0] = 2.0;
        let base = set(5, &[0]);
        assert_eq!(candidate_set(&w, &iv, &base, Bound::Lower, 1.0), set(5, &[0, 1, 2]));
        assert_eq!(candidate_set(&w, &iv, &base, Bound::Lower, 1e300), base);
        assert_eq!(candidate_set(&w, &iv, &base, Bound::Lower, f64::INFINITY), base);

        let g = GridWorld::new(4, 3, 1.0).unwrap();
        let mut iv = SafetyIntervals::new(set(12, &[5]), 0.0);
        iv.lower[5] = 0.0;
        assert_eq!(
            candidate_set(&g, &iv, &set(12, &[5]), Bound::Lower, 0.0),
            StateSet::full(12)
        );
    }

    #[test]
    fn reachable_examples() {
        let w = GridWorld::new(5, 5, 1.0).unwrap();
        assert!(reachable_set(&w, &StateSet::empty(25)).is_empty());
        let c = w.index(State::new(2, 2));
        let r = reachable_set(&w, &set(25, &[c]));
        assert_eq!(r, set(25, &[c, c + 5, c + 1, c - 5, c - 1]));
        assert_eq!(reachable_set(&w, &StateSet::full(25)), StateSet::full(25));
    }

    #[test]
    fn returnable_examples() {
        let w = GridWorld::new(4, 1, 1.0).unwrap();
        let x = set(4, &[0, 1, 2]);
        assert_eq!(returnable_set(&w, &x, &x), x);
        assert!(returnable_set(&w, &x, &StateSet::empty(4)).is_empty());
        assert_eq!(returnable_set(&w, &x, &set(4, &[0])), x);
        // a gap in the corridor blocks the return
        assert_eq!(returnable_set(&w, &set(4, &[0, 2, 3]), &set(4, &[0])), set(4, &[0]));
    }

    #[test]
    fn expand_without_information_is_identity() {
        let w = GridWorld::new(5, 5, 1.0).unwrap();
        let s0 = set(25, &[12, 13]);
        let iv = SafetyIntervals::new(s0.clone(), 0.0);
        let (_, x) = expand_safe_set(&w, &iv, &s0, 1e300, Side::Pessimistic);
        assert_eq!(x, s0);
    }

    #[test]
    fn sides_coincide_when_bounds_do() {
        let w = GridWorld::new(5, 5, 1.0).unwrap();
        let s0 = set(25, &[12]);
        let mut iv = SafetyIntervals::new(s0.clone(), 0.0);
        for i in 0..25 {
            let v = 2.0 - 0.1 * i as f64;
            iv.lower[i] = v;
            iv.upper[i] = v;
        }
        let p = expand_safe_set(&w, &iv, &s0, 0.7, Side::Pessimistic);
        let o = expand_safe_set(&w, &iv, &s0, 0.7, Side::Optimistic);
        assert_eq!(p, o);
    }

    #[test]
    fn expander_examples() {
        let w = GridWorld::new(3, 1, 1.0).unwrap();
        let mut iv = SafetyIntervals::new(set(3, &[0]), 0.0);
        iv.lower[0] = 0.2;
        iv.upper[0] = 1.5;
        let safe = set(3, &[0]);
        let ex = expanders(&w, &iv, &safe, &safe, 1.0);
        assert!(ex.set.contains(0));
        assert_eq!(ex.counts[0], 1);

        let all = StateSet::full(3);
        let ex = expanders(&w, &iv, &safe, &all, 1.0);
        assert!(ex.set.is_empty());

        let mut iv = SafetyIntervals::new(StateSet::empty(2), 0.0);
        iv.lower = vec![0.0, -1.0];
        iv.upper = vec![0.0, 2.0];
        assert_eq!(iv.widths(), vec![0.0, 3.0]);
    }

    #[test]
    fn goal_selection() {
        let w = [1.0, 2.0, 2.0, 0.5];
        assert_eq!(select_goal(&set(4, &[3]), &w), Some(3));
        assert_eq!(select_goal(&set(4, &[0, 1]), &w), Some(1));
        assert_eq!(select_goal(&set(4, &[1, 2]), &w), Some(1));
        assert_eq!(select_goal(&StateSet::empty(4), &w), None);
    }

    #[test]
    fn state_set_basics() {
        let mut a = set(6, &[1, 3]);
        assert_eq!(a.len(), 2);
        assert!(!a.insert(1));
        assert!(a.insert(4));
        assert!(a.remove(3));
        assert_eq!(a.iter().collect::<Vec<_>>(), vec![1, 4]);
        let b = set(6, &[4, 5]);
        assert_eq!(a.union(&b), set(6, &[1, 4, 5]));
        assert_eq!(a.intersection(&b), set(6, &[4]));
        assert_eq!(a.difference(&b), set(6, &[1]));
        assert!(set(6, &[4]).is_subset(&a));
        assert_eq!(format!("{a:?}"), "{1, 4}");
    }
}
