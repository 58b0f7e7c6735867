//! Expert policies and trajectory datasets.
//!
//! The flat expert is greedy with respect to value iteration; ties go to the
//! lowest action index so golden trajectories are reproducible. A softmax expert
//! over the same Q values is available for more diverse datasets.

use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, Coord, GridMap, Gridworld, StateId, Task, N_ACTIONS};
use crate::rng::{self, Rng};

pub type ActionDist = [f64; N_ACTIONS];

const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("value iteration did not converge: residual {residual:e} after {iters} sweeps")]
    NoConvergence { residual: f64, iters: usize },
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("{} cells cannot reach subgoal {subgoal:?}", unreachable.len())]
    UnreachableRegion {
        subgoal: Coord,
        unreachable: Vec<Coord>,
        /// The option with uniform fallback on the unreachable cells.
        option: Box<OptionDefinition>,
    },
    #[error("trajectory line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub v: Vec<f64>,
    pub q: Vec<ActionDist>,
    pub residual: f64,
    pub sweeps: usize,
}

/// One synchronous Bellman sweep towards `goal`. The goal is absorbing with value 0.
pub fn bellman_sweep(env: &Gridworld, goal: StateId, v: &[f64]) -> (Vec<f64>, Vec<ActionDist>) {
    let gamma = env.spec.discount;
    let mut q = vec![[0.0; N_ACTIONS]; env.n_states()];
    for s in env.map.states() {
        if s == goal {
            continue;
        }
        for a in Action::ALL {
            q[s.0][a.index()] = env
                .transitions(s, a)
                .iter()
                .map(|&(n, p)| p * (env.reward(n, goal) + gamma * v[n.0]))
                .sum();
        }
    }
    let v_next = q
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if i == goal.0 {
                0.0
            } else {
                row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    (v_next, q)
}

pub fn value_iteration(
    env: &Gridworld,
    goal: StateId,
    tol: f64,
    max_iters: usize,
) -> Result<ValueTable, ExpertError> {
    if !(tol > 0.0) {
        return Err(ExpertError::BadTolerance);
    }
    let mut v = vec![0.0; env.n_states()];
    let mut residual = f64::INFINITY;
    for sweep in 1..=max_iters {
        let (v_next, q) = bellman_sweep(env, goal, &v);
        residual = v_next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = v_next;
        if residual < tol {
            return Ok(ValueTable {
                v,
                q,
                residual,
                sweeps: sweep,
            });
        }
    }
    Err(ExpertError::NoConvergence {
        residual,
        iters: max_iters,
    })
}

pub fn argmax_lowest(row: &[f64]) -> usize {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter()
        .position(|&x| x >= best - TIE_TOL * best.abs().max(1.0))
        .unwrap_or(0)
}

pub fn one_hot(a: usize) -> ActionDist {
    let mut d = [0.0; N_ACTIONS];
    d[a] = 1.0;
    d
}

impl ValueTable {
    pub fn greedy_action(&self, s: StateId) -> Action {
        Action::ALL[argmax_lowest(&self.q[s.0])]
    }

    /// Deterministic greedy policy with lowest-index tie-break.
    pub fn greedy_policy(&self) -> Vec<ActionDist> {
        self.q.iter().map(|row| one_hot(argmax_lowest(row))).collect()
    }

    /// Boltzmann policy over Q with inverse temperature `beta`.
    pub fn softmax_policy(&self, beta: f64) -> Vec<ActionDist> {
        self.q
            .iter()
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut d = row.map(|x| (beta * (x - m)).exp());
                let z: f64 = d.iter().sum();
                d.iter_mut().for_each(|x| *x /= z);
                d
            })
            .collect()
    }

    /// Actions whose Q value is within tie tolerance of the state value.
    pub fn optimal_actions(&self, s: StateId) -> Vec<Action> {
        let row = &self.q[s.0];
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Action::ALL
            .into_iter()
            .filter(|a| row[a.index()] >= best - 1e-9 * best.abs().max(1.0))
            .collect()
    }
}

pub fn sample_action(dist: &ActionDist, rng: &mut Rng) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::ALL[i];
        }
    }
    // Rounding left u above the cumulative mass; take the last supported action.
    let last = dist.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    Action::ALL[last]
}

/// Hidden per-step labels of a hierarchical expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLabel {
    /// Meta-level choice index (primitives first, then options).
    pub choice: usize,
    /// Option index when the choice is an option.
    pub option: Option<usize>,
    /// The segment ends after this step.
    pub terminate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateId>,
    pub actions: Vec<Action>,
    pub task: Task,
    pub seed: u64,
    pub truncated: bool,
    pub annotations: Option<Vec<StepLabel>>,
}

impl Trajectory {
    /// Number of actions, T.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks that each state follows from its predecessor under some attempted move.
    pub fn is_consistent(&self, env: &Gridworld) -> bool {
        if self.states.len() != self.actions.len() + 1 || self.actions.is_empty() {
            return false;
        }
        self.actions.iter().enumerate().all(|(t, &a)| {
            env.transitions(self.states[t], a)
                .iter()
                .any(|&(n, p)| p > 0.0 && n == self.states[t + 1])
        })
    }
}

/// Rolls out `policy` from `task.start` until the goal or `max_steps`.
pub fn rollout_flat(
    env: &Gridworld,
    task: &Task,
    policy: &[ActionDist],
    rng: &mut Rng,
    max_steps: usize,
    seed: u64,
) -> Trajectory {
    let mut s = task.start;
    let mut states = vec![s];
    let mut actions = Vec::new();
    let mut reached = false;
    while actions.len() < max_steps {
        let a = sample_action(&policy[s.0], rng);
        let out = env.step(s, a, task.goal, rng);
        actions.push(a);
        states.push(out.next);
        s = out.next;
        if out.done {
            reached = true;
            break;
        }
    }
    Trajectory {
        states,
        actions,
        task: task.clone(),
        seed,
        truncated: !reached,
        annotations: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertConfig {
    pub n_trajectories: usize,
    /// `None` selects the greedy one-hot expert; `Some(beta)` a softmax expert.
    pub temperature: Option<f64>,
    pub vi_tol: f64,
    pub vi_max_iters: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            n_trajectories: 200,
            temperature: None,
            vi_tol: 1e-10,
            vi_max_iters: 10_000,
        }
    }
}

/// Samples a dataset following the random-task, value-iteration expert loop.
///
/// Trajectory `i` draws its task and actions from a stream seeded with
/// `derive_seed(seed, "expert", i)`, which is recorded in the trajectory.
pub fn flat_expert_dataset(
    env: &Gridworld,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<Vec<Trajectory>, ExpertError> {
    (0..cfg.n_trajectories as u64)
        .map(|i| {
            let traj_seed = rng::derive_seed(seed, "expert", i);
            let mut rng = rng::seeded(traj_seed);
            let task = env.sample_task(&mut rng);
            let vt = value_iteration(env, task.goal, cfg.vi_tol, cfg.vi_max_iters)?;
            let policy = match cfg.temperature {
                None => vt.greedy_policy(),
                Some(beta) => vt.softmax_policy(beta),
            };
            Ok(rollout_flat(
                env,
                &task,
                &policy,
                &mut rng,
                env.spec.max_episode_steps,
                traj_seed,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionDefinition {
    pub label: String,
    pub policy: Vec<ActionDist>,
    pub termination: Vec<f64>,
}

impl OptionDefinition {
    pub fn validate(&self) -> bool {
        self.policy
            .iter()
            .all(|d| (d.iter().sum::<f64>() - 1.0).abs() <= 1e-12 && d.iter().all(|&p| p >= 0.0))
            && self.termination.iter().all(|b| (0.0..=1.0).contains(b))
    }
}

/// Shortest-path option to `subgoal` that terminates exactly there.
pub fn make_handcoded_option(map: &GridMap, subgoal: StateId) -> Result<OptionDefinition, ExpertError> {
    let dist = map.bfs_distances(subgoal);
    let mut unreachable = Vec::new();
    let policy = map
        .states()
        .map(|s| match dist[s.0] {
            None => {
                unreachable.push(map.coord(s));
                [1.0 / N_ACTIONS as f64; N_ACTIONS]
            }
            Some(0) => one_hot(0),
            Some(d) => {
                let a = Action::ALL
                    .into_iter()
                    .find(|&a| dist[map.neighbor(s, a).0] == Some(d - 1))
                    .expect("a BFS predecessor exists");
                one_hot(a.index())
            }
        })
        .collect();
    let termination = map.states().map(|s| if s == subgoal { 1.0 } else { 0.0 }).collect();
    let (r, c) = map.coord(subgoal);
    let option = OptionDefinition {
        label: format!("to_{r}_{c}"),
        policy,
        termination,
    };
    if unreachable.is_empty() {
        Ok(option)
    } else {
        Err(ExpertError::UnreachableRegion {
            subgoal: (r, c),
            unreachable,
            option: Box::new(option),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRecord {
    map_id: String,
    seed: u64,
    start: Coord,
    goal: Coord,
    states: Vec<Coord>,
    actions: Vec<usize>,
    #[serde(default)]
    truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<Vec<StepLabel>>,
}

pub fn write_jsonl<W: Write>(map: &GridMap, trajs: &[Trajectory], mut out: W) -> std::io::Result<()> {
    for t in trajs {
        let rec = TrajectoryRecord {
            map_id: t.task.map_id.clone(),
            seed: t.seed,
            start: map.coord(t.task.start),
            goal: map.coord(t.task.goal),
            states: t.states.iter().map(|&s| map.coord(s)).collect(),
            actions: t.actions.iter().map(|a| a.index()).collect(),
            truncated: t.truncated,
            annotations: t.annotations.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(map: &GridMap, input: R) -> Result<Vec<Trajectory>, ExpertError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| ExpertError::BadRecord { line: i + 1, msg };
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let state = |c: Coord| map.state_at(c).ok_or_else(|| bad(format!("{c:?} is not a free cell")));
        let states = rec.states.iter().map(|&c| state(c)).collect::<Result<Vec<_>, _>>()?;
        let actions = rec
            .actions
            .iter()
            .map(|&a| Action::from_index(a).ok_or_else(|| bad(format!("action code {a}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if states.len() != actions.len() + 1 || actions.is_empty() {
            return Err(bad("need T >= 1 actions and T+1 states".into()));
        }
        out.push(Trajectory {
            states,
            actions,
            task: Task {
                start: state(rec.start)?,
                goal: state(rec.goal)?,
                map_id: rec.map_id,
            },
            seed: rec.seed,
            truncated: rec.truncated,
            annotations: rec.annotations,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::MdpSpec;
    use crate::rng::seeded;

    fn world(text: &str, gamma: f64) -> Gridworld {
        let spec = MdpSpec {
            discount: gamma,
            ..MdpSpec::default()
        };
        Gridworld::new(GridMap::parse("t", text).unwrap(), spec).unwrap()
    }

    #[test]
    fn corridor_values_match_hand_fixed_point() {
        let env = world("#####\n#...#\n#####", 0.9);
        let vt = value_iteration(&env, StateId(2), 1e-12, 1000).unwrap();
        assert!((vt.v[0] - 0.9).abs() < 1e-12);
        assert!((vt.v[1] - 1.0).abs() < 1e-12);
        assert_eq!(vt.v[2], 0.0);
        assert!(vt.residual < 1e-12);
    }

    #[test]
    fn open_room_values_are_discounted_bfs_distance() {
        let env = world(
            "#######\n#.....#\n#.....#\n#.....#\n#.....#\n#.....#\n#######",
            0.95,
        );
        let goal = env.map.state_at((2, 4)).unwrap();
        let vt = value_iteration(&env, goal, 1e-12, 1000).unwrap();
        let dist = env.map.bfs_distances(goal);
        for s in env.map.states() {
            let d = dist[s.0].unwrap();
            let expected = if d == 0 { 0.0 } else { 0.95_f64.powi(d as i32 - 1) };
            assert!((vt.v[s.0] - expected).abs() < 1e-10, "{:?}", env.map.coord(s));
        }
    }

    #[test]
    fn no_convergence_is_reported() {
        let env = world("#######\n#.....#\n#######", 0.9);
        assert!(matches!(
            value_iteration(&env, StateId(4), 1e-12, 2),
            Err(ExpertError::NoConvergence { iters: 2, .. })
        ));
    }

    #[test]
    fn sweeps_from_zero_are_monotone() {
        let env = Gridworld::new(
            GridMap::bundled("tworoom").unwrap(),
            MdpSpec {
                slip_prob: 0.1,
                ..MdpSpec::default()
            },
        )
        .unwrap();
        let goal = StateId(7);
        let mut v = vec![0.0; env.n_states()];
        for _ in 0..60 {
            let (next, _) = bellman_sweep(&env, goal, &v);
            assert!(next.iter().zip(&v).all(|(a, b)| a >= b));
            v = next;
        }
    }

    #[test]
    fn greedy_rollout_is_shortest_path() {
        let env = Gridworld::new(GridMap::bundled("fourroom").unwrap(), MdpSpec::default()).unwrap();
        for seed in 0..20 {
            let mut rng = seeded(seed);
            let task = env.sample_task(&mut rng);
            let vt = value_iteration(&env, task.goal, 1e-10, 10_000).unwrap();
            let traj = rollout_flat(&env, &task, &vt.greedy_policy(), &mut rng, 500, seed);
            let d = env.map.bfs_distances(task.goal)[task.start.0].unwrap();
            assert_eq!(traj.len(), d);
            assert!(!traj.truncated);
            assert!(traj.is_consistent(&env));
        }
    }

    #[test]
    fn adjacent_start_gives_single_step() {
        let env = world("#####\n#...#\n#####", 0.9);
        let task = Task {
            start: StateId(1),
            goal: StateId(2),
            map_id: "t".into(),
        };
        let vt = value_iteration(&env, task.goal, 1e-12, 100).unwrap();
        let traj = rollout_flat(&env, &task, &vt.greedy_policy(), &mut seeded(0), 10, 0);
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.actions, vec![Action::East]);
    }

    #[test]
    fn softmax_rollouts_are_reproducible_and_truncation_flagged() {
        let env = Gridworld::new(GridMap::bundled("tworoom").unwrap(), MdpSpec::default()).unwrap();
        let task = env.sample_task(&mut seeded(1));
        let vt = value_iteration(&env, task.goal, 1e-10, 10_000).unwrap();
        let pol = vt.softmax_policy(5.0);
        let a = rollout_flat(&env, &task, &pol, &mut seeded(42), 3, 42);
        let b = rollout_flat(&env, &task, &pol, &mut seeded(42), 3, 42);
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_jsonl(&env.map, &[a.clone()], &mut buf_a).unwrap();
        write_jsonl(&env.map, &[b], &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        if a.len() == 3 && *a.states.last().unwrap() != task.goal {
            assert!(a.truncated);
        }
    }

    #[test]
    fn tie_break_prefers_lowest_index() {
        assert_eq!(argmax_lowest(&[0.5, 0.5, 0.1, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.5, 0.1, 0.5]), 1);
    }

    #[test]
    fn doorway_option_routes_room_towards_doorway() {
        let map = GridMap::bundled("tworoom").unwrap();
        let door = map.state_at((3, 5)).unwrap();
        let opt = make_handcoded_option(&map, door).unwrap();
        assert!(opt.validate());
        assert_eq!(opt.termination[door.0], 1.0);
        let dist = map.bfs_distances(door);
        for s in map.states().filter(|&s| s != door) {
            let a = Action::ALL[argmax_lowest(&opt.policy[s.0])];
            assert_eq!(dist[map.neighbor(s, a).0], Some(dist[s.0].unwrap() - 1));
            assert_eq!(opt.termination[s.0], 0.0);
        }
    }

    #[test]
    fn walled_pocket_is_flagged_unreachable() {
        let map = GridMap::parse("p", "######\n#..#.#\n######").unwrap();
        match make_handcoded_option(&map, StateId(0)) {
            Err(ExpertError::UnreachableRegion { unreachable, option, .. }) => {
                assert_eq!(unreachable, vec![(1, 4)]);
                assert_eq!(option.policy[2], [0.25; 4]);
            }
            other => panic!("expected UnreachableRegion, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let env = Gridworld::new(GridMap::bundled("tworoom").unwrap(), MdpSpec::default()).unwrap();
        let cfg = ExpertConfig {
            n_trajectories: 5,
            ..ExpertConfig::default()
        };
        let mut data = flat_expert_dataset(&env, &cfg, 3).unwrap();
        data[0].annotations = Some(vec![
            StepLabel {
                choice: 4,
                option: Some(0),
                terminate: false
            };
            data[0].len()
        ]);
        let mut buf = Vec::new();
        write_jsonl(&env.map, &data, &mut buf).unwrap();
        let back = read_jsonl(&env.map, buf.as_slice()).unwrap();
        assert_eq!(back, data);
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        assert!(first.starts_with("{\"map_id\":\"tworoom\",\"seed\":"));
    }

    #[test]
    fn bad_records_are_rejected() {
        let map = GridMap::bundled("tworoom").unwrap();
        let line = br#"{"map_id":"tworoom","seed":0,"start":[0,0],"goal":[1,2],"states":[[0,0],[1,1]],"actions":[1]}"#;
        assert!(matches!(
            read_jsonl(&map, &line[..]),
            Err(ExpertError::BadRecord { line: 1, .. })
        ));
    }
}
