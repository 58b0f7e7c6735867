//! Options as temporally extended actions, and SMDP Q-learning over
//! primitives and options.
//!
//! Choice indices: `0..4` are the primitive moves in N, E, S, W order, followed
//! by the options in set order.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{argmax_lowest, sample_action, OptionDefinition, StepLabel, Trajectory};
use crate::gridworld::{Action, Gridworld, StateId, Task, N_ACTIONS};
use crate::rng::{self, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum SmdpError {
    #[error("duplicate option label {0:?}")]
    DuplicateLabel(String),
    #[error("option {label:?} covers {found} states, map has {expected}")]
    IncompleteOption {
        label: String,
        found: usize,
        expected: usize,
    },
    #[error("Q table shape does not match the environment or option set")]
    ShapeMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionSet {
    pub options: Vec<OptionDefinition>,
    pub primitives_included: bool,
}

impl OptionSet {
    pub fn new(options: Vec<OptionDefinition>) -> Result<Self, SmdpError> {
        for (i, o) in options.iter().enumerate() {
            if options[..i].iter().any(|p| p.label == o.label) {
                return Err(SmdpError::DuplicateLabel(o.label.clone()));
            }
        }
        Ok(OptionSet {
            options,
            primitives_included: true,
        })
    }

    pub fn primitives_only() -> Self {
        OptionSet {
            options: Vec::new(),
            primitives_included: true,
        }
    }

    pub fn check_covers(&self, n_states: usize) -> Result<(), SmdpError> {
        for o in &self.options {
            let found = o.policy.len().min(o.termination.len());
            if o.policy.len() != n_states || o.termination.len() != n_states {
                return Err(SmdpError::IncompleteOption {
                    label: o.label.clone(),
                    found,
                    expected: n_states,
                });
            }
        }
        Ok(())
    }

    pub fn n_choices(&self) -> usize {
        N_ACTIONS + self.options.len()
    }

    pub fn choice(&self, index: usize) -> Choice {
        if index < N_ACTIONS {
            Choice::Primitive(Action::ALL[index])
        } else {
            Choice::Option(index - N_ACTIONS)
        }
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = ["N", "E", "S", "W"].iter().map(|s| s.to_string()).collect();
        labels.extend(self.options.iter().map(|o| o.label.clone()));
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Primitive(Action),
    Option(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionOutcome {
    pub next: StateId,
    /// Discounted return accrued during execution, `sum_k gamma^k r_k`.
    pub ret: f64,
    pub duration: usize,
    /// Goal reached.
    pub done: bool,
    /// `(state, action)` pairs in execution order.
    pub trace: Vec<(StateId, Action)>,
    /// Termination fired (as opposed to goal, episode budget or step cap).
    pub terminated: bool,
}

/// Runs `option` from `s` until its termination fires, the goal is reached, the
/// option step cap binds, or `budget` flat steps are used. Always takes a step.
pub fn execute_option(
    env: &Gridworld,
    option: &OptionDefinition,
    s: StateId,
    goal: StateId,
    rng: &mut Rng,
    option_max_steps: usize,
    budget: usize,
) -> OptionOutcome {
    let gamma = env.spec.discount;
    let cap = option_max_steps.min(budget).max(1);
    let mut cur = s;
    let mut ret = 0.0;
    let mut discount = 1.0;
    let mut trace = Vec::new();
    let mut done = false;
    let mut terminated = false;
    while trace.len() < cap {
        let a = sample_action(&option.policy[cur.0], rng);
        let out = env.step(cur, a, goal, rng);
        trace.push((cur, a));
        ret += discount * out.reward;
        discount *= gamma;
        cur = out.next;
        if out.done {
            done = true;
            break;
        }
        if rng.random::<f64>() < option.termination[cur.0] {
            terminated = true;
            break;
        }
    }
    OptionOutcome {
        next: cur,
        ret,
        duration: trace.len(),
        done,
        trace,
        terminated,
    }
}

fn execute_choice(
    env: &Gridworld,
    set: &OptionSet,
    choice: usize,
    s: StateId,
    goal: StateId,
    rng: &mut Rng,
    option_max_steps: usize,
    budget: usize,
) -> OptionOutcome {
    match set.choice(choice) {
        Choice::Primitive(a) => {
            let out = env.step(s, a, goal, rng);
            OptionOutcome {
                next: out.next,
                ret: out.reward,
                duration: 1,
                done: out.done,
                trace: vec![(s, a)],
                terminated: true,
            }
        }
        Choice::Option(h) => execute_option(env, &set.options[h], s, goal, rng, option_max_steps, budget),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmdpQTable {
    pub n_states: usize,
    pub labels: Vec<String>,
    /// Row-major `q[s * n_choices + c]`.
    pub q: Vec<f64>,
    pub visits: Vec<u64>,
}

impl SmdpQTable {
    pub fn zeros(n_states: usize, set: &OptionSet) -> Self {
        let n = set.n_choices();
        SmdpQTable {
            n_states,
            labels: set.labels(),
            q: vec![0.0; n_states * n],
            visits: vec![0; n_states * n],
        }
    }

    pub fn n_choices(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        let n = self.n_choices();
        &self.q[s.0 * n..(s.0 + 1) * n]
    }

    pub fn get(&self, s: StateId, c: usize) -> f64 {
        self.q[s.0 * self.n_choices() + c]
    }

    pub fn greedy(&self, s: StateId) -> usize {
        argmax_lowest(self.row(s))
    }

    /// Greedy choice restricted to primitive moves.
    pub fn greedy_primitive(&self, s: StateId) -> Action {
        Action::ALL[argmax_lowest(&self.row(s)[..N_ACTIONS])]
    }

    pub fn value(&self, s: StateId) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n_states).map(|s| self.value(StateId(s))).collect()
    }

    pub fn matches(&self, n_states: usize, set: &OptionSet) -> bool {
        self.n_states == n_states && self.labels == set.labels() && self.q.len() == n_states * set.n_choices()
    }

    fn epsilon_greedy(&self, s: StateId, epsilon: f64, rng: &mut Rng) -> usize {
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            rng.random_range(0..self.n_choices())
        } else {
            self.greedy(s)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmdpConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of episodes over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub option_max_steps: usize,
    pub seed: u64,
}

impl Default for SmdpConfig {
    fn default() -> Self {
        SmdpConfig {
            episodes: 3000,
            learning_rate: 0.5,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            option_max_steps: 20,
            seed: 0,
        }
    }
}

impl SmdpConfig {
    pub fn epsilon(&self, episode: usize) -> f64 {
        let horizon = (self.episodes as f64 * self.epsilon_decay_fraction).max(1.0);
        let frac = (episode as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Tabular SMDP Q-learning towards a fixed `goal`, with uniformly random
/// non-goal starts each episode.
pub fn smdp_q_learning(
    env: &Gridworld,
    set: &OptionSet,
    goal: StateId,
    config: &SmdpConfig,
) -> Result<SmdpQTable, SmdpError> {
    set.check_covers(env.n_states())?;
    let mut table = SmdpQTable::zeros(env.n_states(), set);
    train_more(env, set, goal, config, &mut table)?;
    Ok(table)
}

/// Continues learning into an existing table.
pub fn train_more(
    env: &Gridworld,
    set: &OptionSet,
    goal: StateId,
    config: &SmdpConfig,
    table: &mut SmdpQTable,
) -> Result<(), SmdpError> {
    if !table.matches(env.n_states(), set) {
        return Err(SmdpError::ShapeMismatch);
    }
    let gamma = env.spec.discount;
    let n = table.n_choices();
    let mut rng = rng::derived(config.seed, "smdp", 0);
    let max_steps = env.spec.max_episode_steps;
    for episode in 0..config.episodes {
        let eps = config.epsilon(episode);
        let mut s = loop {
            let c = StateId(rng.random_range(0..env.n_states()));
            if c != goal {
                break c;
            }
        };
        let mut used = 0;
        while used < max_steps {
            let c = table.epsilon_greedy(s, eps, &mut rng);
            let out = execute_choice(env, set, c, s, goal, &mut rng, config.option_max_steps, max_steps - used);
            used += out.duration;
            let bootstrap = if out.done {
                0.0
            } else {
                gamma.powi(out.duration as i32) * table.value(out.next)
            };
            let idx = s.0 * n + c;
            table.q[idx] += config.learning_rate * (out.ret + bootstrap - table.q[idx]);
            table.visits[idx] += 1;
            s = out.next;
            if out.done {
                break;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub choice: usize,
    pub start: usize,
    pub duration: usize,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedRollout {
    pub trajectory: Trajectory,
    pub segments: Vec<Segment>,
    pub success: bool,
}

impl SegmentedRollout {
    pub fn is_option_segment(&self, seg: &Segment) -> bool {
        seg.choice >= N_ACTIONS
    }

    /// Trajectory with per-step choice labels; `terminate` marks each segment's last step.
    pub fn annotated_trajectory(&self) -> Trajectory {
        let mut labels = Vec::with_capacity(self.trajectory.len());
        for seg in &self.segments {
            for k in 0..seg.duration {
                labels.push(StepLabel {
                    choice: seg.choice,
                    option: seg.choice.checked_sub(N_ACTIONS),
                    terminate: k + 1 == seg.duration,
                });
            }
        }
        let mut t = self.trajectory.clone();
        t.annotations = Some(labels);
        t
    }
}

/// Rolls out the meta-policy in `table`: greedy when `epsilon == 0`.
pub fn rollout_meta(
    env: &Gridworld,
    table: &SmdpQTable,
    set: &OptionSet,
    task: &Task,
    rng: &mut Rng,
    epsilon: f64,
    option_max_steps: usize,
    seed: u64,
) -> Result<SegmentedRollout, SmdpError> {
    if !table.matches(env.n_states(), set) {
        return Err(SmdpError::ShapeMismatch);
    }
    let max_steps = env.spec.max_episode_steps;
    let mut s = task.start;
    let mut states = vec![s];
    let mut actions = Vec::new();
    let mut segments = Vec::new();
    let mut success = false;
    while actions.len() < max_steps {
        let c = table.epsilon_greedy(s, epsilon, rng);
        let out = execute_choice(env, set, c, s, task.goal, rng, option_max_steps, max_steps - actions.len());
        segments.push(Segment {
            choice: c,
            start: actions.len(),
            duration: out.duration,
            ret: out.ret,
        });
        for (k, &(_, a)) in out.trace.iter().enumerate() {
            actions.push(a);
            states.push(out.trace.get(k + 1).map_or(out.next, |&(n, _)| n));
        }
        s = out.next;
        if out.done {
            success = true;
            break;
        }
    }
    Ok(SegmentedRollout {
        trajectory: Trajectory {
            states,
            actions,
            task: task.clone(),
            seed,
            truncated: !success,
            annotations: None,
        },
        segments,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::{make_handcoded_option, one_hot, value_iteration};
    use crate::gridworld::{GridMap, MdpSpec};
    use crate::rng::seeded;

    fn env(name: &str) -> Gridworld {
        Gridworld::new(GridMap::bundled(name).unwrap(), MdpSpec::default()).unwrap()
    }

    fn constant_option(n: usize, a: Action, beta: f64) -> OptionDefinition {
        OptionDefinition {
            label: format!("const{}", a.index()),
            policy: vec![one_hot(a.index()); n],
            termination: vec![beta; n],
        }
    }

    #[test]
    fn always_terminating_option_lasts_one_step() {
        let e = env("tworoom");
        let opt = constant_option(e.n_states(), Action::East, 1.0);
        let mut rng = seeded(1);
        for s in e.map.states().take(20) {
            let out = execute_option(&e, &opt, s, StateId(40), &mut rng, 20, 200);
            assert_eq!(out.duration, 1);
        }
    }

    #[test]
    fn never_terminating_option_hits_cap() {
        let e = env("tworoom");
        let opt = constant_option(e.n_states(), Action::North, 0.0);
        let s = e.map.state_at((5, 2)).unwrap();
        let goal = e.map.state_at((5, 8)).unwrap();
        let out = execute_option(&e, &opt, s, goal, &mut seeded(0), 8, 200);
        assert_eq!(out.duration, 8);
        assert!(!out.done && !out.terminated);
    }

    #[test]
    fn doorway_option_runs_to_doorway() {
        let e = env("tworoom");
        let door = e.map.state_at((3, 5)).unwrap();
        let opt = make_handcoded_option(&e.map, door).unwrap();
        let goal = e.map.state_at((1, 9)).unwrap();
        let dist = e.map.bfs_distances(door);
        for (r, c) in [(1, 1), (5, 4), (2, 2), (4, 1)] {
            let s = e.map.state_at((r, c)).unwrap();
            let out = execute_option(&e, &opt, s, goal, &mut seeded(3), 100, 200);
            assert_eq!(out.duration, dist[s.0].unwrap());
            assert_eq!(out.next, door);
            assert!(out.terminated);
        }
    }

    #[test]
    fn zero_episodes_leave_zero_table() {
        let e = env("tworoom");
        let cfg = SmdpConfig {
            episodes: 0,
            ..SmdpConfig::default()
        };
        let t = smdp_q_learning(&e, &OptionSet::primitives_only(), StateId(0), &cfg).unwrap();
        assert!(t.q.iter().all(|&x| x == 0.0));
        assert!(t.visits.iter().all(|&x| x == 0));
    }

    #[test]
    fn primitive_q_learning_recovers_shortest_paths() {
        let e = env("tworoom");
        let goal = e.map.state_at((1, 8)).unwrap();
        let cfg = SmdpConfig {
            episodes: 2000,
            seed: 4,
            ..SmdpConfig::default()
        };
        let table = smdp_q_learning(&e, &OptionSet::primitives_only(), goal, &cfg).unwrap();
        let vt = value_iteration(&e, goal, 1e-12, 10_000).unwrap();
        for s in e.map.states().filter(|&s| s != goal) {
            assert!(vt.optimal_actions(s).contains(&table.greedy_primitive(s)), "{:?}", e.map.coord(s));
        }
        let near = e.map.state_at((1, 7)).unwrap();
        assert!((table.get(near, Action::East.index()) - 1.0).abs() < 0.01);
    }

    #[test]
    fn primitive_rollouts_tile_with_unit_segments() {
        let e = env("tworoom");
        let set = OptionSet::primitives_only();
        let table = SmdpQTable::zeros(e.n_states(), &set);
        let task = e.sample_task(&mut seeded(2));
        let r = rollout_meta(&e, &table, &set, &task, &mut seeded(2), 0.5, 20, 2).unwrap();
        assert!(r.segments.iter().all(|s| s.duration == 1));
        assert_eq!(r.segments.len(), r.trajectory.len());
    }

    #[test]
    fn forced_option_gives_one_long_segment() {
        let e = env("tworoom");
        let set = OptionSet::new(vec![constant_option(e.n_states(), Action::West, 0.0)]).unwrap();
        let mut table = SmdpQTable::zeros(e.n_states(), &set);
        for s in 0..e.n_states() {
            table.q[s * 5 + 4] = 1.0;
        }
        let task = Task {
            start: e.map.state_at((2, 3)).unwrap(),
            goal: e.map.state_at((5, 9)).unwrap(),
            map_id: "tworoom".into(),
        };
        let r = rollout_meta(&e, &table, &set, &task, &mut seeded(0), 0.0, 1000, 0).unwrap();
        assert_eq!(r.segments.len(), 1);
        assert_eq!(r.segments[0].duration, e.spec.max_episode_steps);
        assert!(!r.success);
    }

    #[test]
    fn segments_tile_and_returns_recompute() {
        let e = env("fourroom");
        let doors: Vec<OptionDefinition> = e
            .map
            .bottlenecks()
            .into_iter()
            .map(|d| make_handcoded_option(&e.map, d).unwrap())
            .collect();
        let mut noisy = doors.clone();
        for o in &mut noisy {
            o.termination.iter_mut().for_each(|b| *b = b.max(0.2));
            o.label.push_str("_noisy");
        }
        let mut all = doors;
        all.extend(noisy);
        let set = OptionSet::new(all).unwrap();
        let goal = e.map.state_at((11, 11)).unwrap();
        let cfg = SmdpConfig {
            episodes: 300,
            seed: 1,
            ..SmdpConfig::default()
        };
        let table = smdp_q_learning(&e, &set, goal, &cfg).unwrap();
        let mut rng = seeded(8);
        for i in 0..30 {
            let task = Task {
                start: e.sample_task(&mut rng).start,
                goal,
                map_id: "fourroom".into(),
            };
            if task.start == goal {
                continue;
            }
            let r = rollout_meta(&e, &table, &set, &task, &mut rng, 0.3, 20, i).unwrap();
            let total: usize = r.segments.iter().map(|s| s.duration).sum();
            assert_eq!(total, r.trajectory.len());
            assert!(r.trajectory.is_consistent(&e));
            for seg in &r.segments {
                let mut ret = 0.0;
                for k in 0..seg.duration {
                    let next = r.trajectory.states[seg.start + k + 1];
                    ret += e.spec.discount.powi(k as i32) * e.reward(next, goal);
                }
                assert!((ret - seg.ret).abs() < 1e-12);
            }
            let ann = r.annotated_trajectory();
            let labels = ann.annotations.unwrap();
            let ends: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.terminate).map(|(i, _)| i).collect();
            let expected: Vec<usize> = r.segments.iter().map(|s| s.start + s.duration - 1).collect();
            assert_eq!(ends, expected);
        }
    }

    #[test]
    fn duplicate_labels_rejected() {
        let o = constant_option(3, Action::North, 0.5);
        assert_eq!(
            OptionSet::new(vec![o.clone(), o]).unwrap_err(),
            SmdpError::DuplicateLabel("const0".into())
        );
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let cfg = SmdpConfig {
            episodes: 100,
            ..SmdpConfig::default()
        };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(25) - 0.525).abs() < 1e-12);
        assert!((cfg.epsilon(50) - 0.05).abs() < 1e-12);
        assert!((cfg.epsilon(99) - 0.05).abs() < 1e-12);
    }
}
