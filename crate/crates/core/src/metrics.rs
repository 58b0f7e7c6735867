//! Agent-versus-expert and option-quality metrics.
//!
//! `ce_error` is the visitation-weighted cross-entropy of the agent's action
//! distribution against the expert's greedy action. With a one-hot expert this
//! equals the KL divergence from expert to agent, since the expert entropy is 0.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{argmax_lowest, ActionDist, Trajectory};
use crate::gridworld::{Action, Coord, GridMap, Gridworld, StateId, N_ACTIONS};
use crate::rng::Rng;
use crate::smdp::{OptionSet, SegmentedRollout};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("agent action distribution undefined at weighted state {0}")]
    UndefinedState(usize),
    #[error("value tables cover {0} and {1} states")]
    MismatchedDomains(usize, usize),
    #[error("no rollouts given")]
    EmptyInput,
    #[error("state {0:?} cannot reach every other state")]
    Disconnected(Coord),
    #[error("weights must be a distribution over the states")]
    BadWeights,
}

pub const LAPLACE_SMOOTHING: f64 = 1e-3;

/// `sum_s rho(s) * -ln p_agent(a*(s) | s)` with `a*` the expert's greedy action.
pub fn cross_entropy_metric(
    expert_policy: &[ActionDist],
    agent: &[Option<ActionDist>],
    weights: &[f64],
) -> Result<f64, MetricError> {
    if weights.len() != expert_policy.len() || agent.len() != expert_policy.len() {
        return Err(MetricError::MismatchedDomains(expert_policy.len(), agent.len()));
    }
    let mass: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (mass - 1.0).abs() > 1e-9 {
        return Err(MetricError::BadWeights);
    }
    let mut total = 0.0;
    for (s, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let dist = agent[s].ok_or(MetricError::UndefinedState(s))?;
        let a = argmax_lowest(&expert_policy[s]);
        total += w * -dist[a].ln();
    }
    // -ln 1 is -0.0; report +0.
    Ok(total.max(0.0))
}

/// Per-state action frequencies with additive smoothing; unvisited states are uniform.
pub fn empirical_action_dists(n_states: usize, trajectories: &[Trajectory], smoothing: f64) -> Vec<ActionDist> {
    let mut counts = vec![[0.0; N_ACTIONS]; n_states];
    for t in trajectories {
        for (s, a) in t.states.iter().zip(&t.actions) {
            counts[s.0][a.index()] += 1.0;
        }
    }
    counts
        .into_iter()
        .map(|c| {
            let z: f64 = c.iter().sum::<f64>() + smoothing * N_ACTIONS as f64;
            if z == 0.0 {
                [1.0 / N_ACTIONS as f64; N_ACTIONS]
            } else {
                c.map(|x| (x + smoothing) / z)
            }
        })
        .collect()
}

/// `(1/|S|) sum_s (min(V(s), V*(s)) - V*(s))^2`.
pub fn hinge_value_loss(v_agent: &[f64], v_expert: &[f64]) -> Result<f64, MetricError> {
    if v_agent.len() != v_expert.len() || v_agent.is_empty() {
        return Err(MetricError::MismatchedDomains(v_agent.len(), v_expert.len()));
    }
    let total: f64 = v_agent
        .iter()
        .zip(v_expert)
        .map(|(&v, &star)| (v.min(star) - star).powi(2))
        .sum();
    Ok(total / v_agent.len() as f64)
}

/// Population mean and variance of each option's termination probability over states.
pub fn termination_stats(set: &OptionSet) -> Vec<(f64, f64)> {
    set.options
        .iter()
        .map(|o| {
            let n = o.termination.len() as f64;
            let mean = o.termination.iter().sum::<f64>() / n;
            let var = o.termination.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub option_time_fraction: f64,
    pub median_duration: f64,
    pub mean_duration: f64,
    pub success_rate: f64,
    /// False when no option segment occurred; durations are then reported as 0.
    pub durations_defined: bool,
}

pub fn usage_stats(rollouts: &[SegmentedRollout]) -> Result<UsageStats, MetricError> {
    if rollouts.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut durations = Vec::new();
    let mut all_steps = 0usize;
    for r in rollouts {
        for seg in &r.segments {
            all_steps += seg.duration;
            if r.is_option_segment(seg) {
                durations.push(seg.duration as f64);
            }
        }
    }
    let option_steps: f64 = durations.iter().sum();
    let success = rollouts.iter().filter(|r| r.success).count() as f64 / rollouts.len() as f64;
    let option_time_fraction = if all_steps == 0 { 0.0 } else { option_steps / all_steps as f64 };
    if durations.is_empty() {
        return Ok(UsageStats {
            option_time_fraction,
            median_duration: 0.0,
            mean_duration: 0.0,
            success_rate: success,
            durations_defined: false,
        });
    }
    durations.sort_by(f64::total_cmp);
    let m = durations.len();
    let median = if m % 2 == 1 {
        durations[m / 2]
    } else {
        0.5 * (durations[m / 2 - 1] + durations[m / 2])
    };
    Ok(UsageStats {
        option_time_fraction,
        median_duration: median,
        mean_duration: option_steps / m as f64,
        success_rate: success,
        durations_defined: true,
    })
}

/// Mean expected hitting time over ordered pairs of distinct states for the
/// uniformly random primitive walk, from one linear solve per target.
pub fn diffusion_time_exact(map: &GridMap) -> Result<f64, MetricError> {
    let n = map.n_states();
    let dist = map.bfs_distances(StateId(0));
    if let Some(s) = dist.iter().position(Option::is_none) {
        return Err(MetricError::Disconnected(map.coord(StateId(s))));
    }
    let mut total = 0.0;
    for target in 0..n {
        let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
        let mut pos = vec![usize::MAX; n];
        for (k, &i) in others.iter().enumerate() {
            pos[i] = k;
        }
        let m = others.len();
        let mut a = DMatrix::<f64>::identity(m, m);
        for (row, &i) in others.iter().enumerate() {
            for act in Action::ALL {
                let j = map.neighbor(StateId(i), act).0;
                if j != target {
                    a[(row, pos[j])] -= 1.0 / N_ACTIONS as f64;
                }
            }
        }
        let h = a
            .lu()
            .solve(&DVector::from_element(m, 1.0))
            .ok_or(MetricError::Disconnected(map.coord(StateId(target))))?;
        total += h.sum();
    }
    Ok(total / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub truncated_fraction: f64,
    pub samples: usize,
}

/// Monte-carlo hitting times of a walk choosing uniformly among primitives and
/// options, for uniformly drawn ordered pairs. Walks stop the moment the target
/// is entered, including mid-option, and are truncated at `cap` flat steps.
pub fn diffusion_time_monte_carlo(
    env: &Gridworld,
    set: &OptionSet,
    samples: usize,
    cap: usize,
    option_max_steps: usize,
    rng: &mut Rng,
) -> Result<DiffusionEstimate, MetricError> {
    if !env.map.is_connected() {
        return Err(MetricError::Disconnected(env.map.coord(StateId(0))));
    }
    if samples == 0 {
        return Err(MetricError::EmptyInput);
    }
    let n = env.n_states();
    let n_choices = set.n_choices();
    let mut times = Vec::with_capacity(samples);
    let mut truncated = 0usize;
    for _ in 0..samples {
        let from = rng.random_range(0..n);
        let mut to = rng.random_range(0..n - 1);
        if to >= from {
            to += 1;
        }
        let (from, to) = (StateId(from), StateId(to));
        let mut s = from;
        let mut steps = 0usize;
        let mut hit = false;
        while steps < cap {
            let c = rng.random_range(0..n_choices);
            let out = if c < N_ACTIONS {
                let o = env.step(s, Action::ALL[c], to, rng);
                (o.next, 1, o.done)
            } else {
                let o = crate::smdp::execute_option(env, &set.options[c - N_ACTIONS], s, to, rng, option_max_steps, cap - steps);
                (o.next, o.duration, o.done)
            };
            s = out.0;
            steps += out.1;
            if out.2 {
                hit = true;
                break;
            }
        }
        if !hit {
            truncated += 1;
        }
        times.push(steps as f64);
    }
    let k = times.len() as f64;
    let mean = times.iter().sum::<f64>() / k;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    Ok(DiffusionEstimate {
        mean,
        std_error: (var / k).sqrt(),
        truncated_fraction: truncated as f64 / k,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionMode {
    ExactPrimitives,
    MonteCarlo { samples: usize, cap: usize },
}

pub fn diffusion_time(
    env: &Gridworld,
    set: &OptionSet,
    mode: DiffusionMode,
    option_max_steps: usize,
    rng: &mut Rng,
) -> Result<f64, MetricError> {
    match mode {
        DiffusionMode::ExactPrimitives => diffusion_time_exact(&env.map),
        DiffusionMode::MonteCarlo { samples, cap } => {
            diffusion_time_monte_carlo(env, set, samples, cap, option_max_steps, rng).map(|e| e.mean)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visitation {
    pub counts: Vec<u64>,
    pub distribution: Vec<f64>,
}

/// Counts of every flat state (including the final one) over all trajectories.
pub fn visitation_counts<'a>(n_states: usize, trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Visitation {
    let mut counts = vec![0u64; n_states];
    for t in trajectories {
        for s in &t.states {
            counts[s.0] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let distribution = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    Visitation { counts, distribution }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitCount {
    pub state: Coord,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ce_error: f64,
    pub hinge_loss: f64,
    pub per_option_termination: Vec<(f64, f64)>,
    pub option_time_fraction: f64,
    pub median_option_duration: f64,
    pub mean_option_duration: f64,
    pub durations_defined: bool,
    pub success_rate: f64,
    pub diffusion_time: f64,
    pub mean_option_kl: f64,
    pub visitation: Vec<VisitCount>,
}

impl MetricReport {
    pub fn is_valid(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        unit(self.option_time_fraction)
            && unit(self.success_rate)
            && self.hinge_loss >= 0.0
            && self.ce_error >= 0.0
            && self.diffusion_time > 0.0
            && self.per_option_termination.iter().all(|&(m, _)| unit(m))
    }

    /// Aligned two-column summary followed by the per-option table.
    pub fn to_text(&self) -> String {
        let rows = [
            ("ce_error", format!("{:.6}", self.ce_error)),
            ("hinge_loss", format!("{:.6}", self.hinge_loss)),
            ("option_time_fraction", format!("{:.4}", self.option_time_fraction)),
            ("median_option_duration", format!("{:.2}", self.median_option_duration)),
            ("mean_option_duration", format!("{:.2}", self.mean_option_duration)),
            ("success_rate", format!("{:.4}", self.success_rate)),
            ("diffusion_time", format!("{:.3}", self.diffusion_time)),
            ("mean_option_kl", format!("{:.4}", self.mean_option_kl)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<24}{v:>14}");
        }
        let _ = writeln!(out, "\n{:<8}{:>12}{:>12}", "option", "mean_beta", "variance");
        for (h, (m, v)) in self.per_option_termination.iter().enumerate() {
            let _ = writeln!(out, "{:<8}{:>12.4}{:>12.4}", h + 1, m, v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::{one_hot, OptionDefinition};
    use crate::gridworld::MdpSpec;
    use crate::rng::seeded;
    use crate::smdp::Segment;

    fn expert(n: usize) -> Vec<ActionDist> {
        (0..n).map(|s| one_hot(s % 4)).collect()
    }

    #[test]
    fn ce_ground_truths() {
        let e = expert(5);
        let w = vec![0.2; 5];
        let same: Vec<Option<ActionDist>> = e.iter().copied().map(Some).collect();
        assert_eq!(cross_entropy_metric(&e, &same, &w).unwrap(), 0.0);
        let uniform = vec![Some([0.25; 4]); 5];
        assert!((cross_entropy_metric(&e, &uniform, &w).unwrap() - 4f64.ln()).abs() < 1e-12);
        let half: Vec<Option<ActionDist>> = (0..5)
            .map(|s| {
                let mut d = [0.5 / 3.0; 4];
                d[s % 4] = 0.5;
                Some(d)
            })
            .collect();
        let ce = cross_entropy_metric(&e, &half, &w).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        assert!((ce - 0.69).abs() < 0.005);
    }

    #[test]
    fn ce_missing_weighted_state() {
        let e = expert(3);
        let agent = vec![Some([0.25; 4]), None, Some([0.25; 4])];
        assert_eq!(
            cross_entropy_metric(&e, &agent, &[0.5, 0.5, 0.0]),
            Err(MetricError::UndefinedState(1))
        );
        assert!(cross_entropy_metric(&e, &agent, &[0.5, 0.0, 0.5]).is_ok());
    }

    #[test]
    fn empirical_dists_smooth_and_default_uniform() {
        let t = crate::ddo::test_support::trajectory(&[0, 0, 1], &[1, 1]);
        let d = empirical_action_dists(3, &[t], LAPLACE_SMOOTHING);
        assert!((d[0][1] - (2.0 + 1e-3) / (2.0 + 4e-3)).abs() < 1e-15);
        assert_eq!(d[2], [0.25; 4]);
        assert!(d.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hinge_ground_truths() {
        let star = [0.3, 0.9, 1.0, 0.0];
        assert_eq!(hinge_value_loss(&star, &star).unwrap(), 0.0);
        let below: Vec<f64> = star.iter().map(|v| v - 1.0).collect();
        assert!((hinge_value_loss(&below, &star).unwrap() - 1.0).abs() < 1e-15);
        let above: Vec<f64> = star.iter().map(|v| v + 5.0).collect();
        assert_eq!(hinge_value_loss(&above, &star).unwrap(), 0.0);
        assert_eq!(
            hinge_value_loss(&[0.0], &star),
            Err(MetricError::MismatchedDomains(1, 4))
        );
    }

    proptest::proptest! {
        #[test]
        fn hinge_is_monotone(base in proptest::collection::vec(-2.0f64..2.0, 1..20), bump in 0.0f64..3.0) {
            let star: Vec<f64> = base.iter().map(|x| x * 0.5 + 0.2).collect();
            let lifted: Vec<f64> = base.iter().map(|x| x + bump).collect();
            let l0 = hinge_value_loss(&base, &star).unwrap();
            let l1 = hinge_value_loss(&lifted, &star).unwrap();
            proptest::prop_assert!(l1 <= l0);
        }
    }

    fn option_with_termination(beta: Vec<f64>) -> OptionDefinition {
        OptionDefinition {
            label: "o".into(),
            policy: vec![[0.25; 4]; beta.len()],
            termination: beta,
        }
    }

    #[test]
    fn termination_stat_arithmetic() {
        let set = OptionSet::new(vec![option_with_termination(vec![0.5; 7])]).unwrap();
        assert_eq!(termination_stats(&set), vec![(0.5, 0.0)]);
        let set = OptionSet::new(vec![option_with_termination(vec![0.2, 0.8])]).unwrap();
        let (m, v) = termination_stats(&set)[0];
        assert!((m - 0.5).abs() < 1e-15 && (v - 0.09).abs() < 1e-15);
    }

    fn rollout(segments: Vec<(usize, usize)>, success: bool) -> SegmentedRollout {
        let mut start = 0;
        let segs: Vec<Segment> = segments
            .into_iter()
            .map(|(choice, duration)| {
                let s = Segment { choice, start, duration, ret: 0.0 };
                start += duration;
                s
            })
            .collect();
        let states: Vec<usize> = (0..=start).map(|i| i % 3).collect();
        let actions = vec![0; start];
        SegmentedRollout {
            trajectory: crate::ddo::test_support::trajectory(&states, &actions),
            segments: segs,
            success,
        }
    }

    #[test]
    fn usage_ground_truths() {
        let prim = rollout(vec![(0, 1), (1, 1), (2, 1)], true);
        let u = usage_stats(&[prim]).unwrap();
        assert_eq!(u.option_time_fraction, 0.0);
        assert!(!u.durations_defined);
        assert_eq!(u.median_duration, 0.0);

        let mixed = rollout(vec![(4, 5), (0, 1), (1, 1), (2, 1), (3, 1), (0, 1)], false);
        let u = usage_stats(&[mixed]).unwrap();
        assert_eq!(u.option_time_fraction, 0.5);
        assert_eq!(u.median_duration, 5.0);
        assert_eq!(u.success_rate, 0.0);
        assert_eq!(usage_stats(&[]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn two_cell_corridor_diffusion_is_four() {
        let map = GridMap::parse("c", "####\n#..#\n####").unwrap();
        assert!((diffusion_time_exact(&map).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn three_cell_corridor_diffusion_is_eight() {
        // Hand solve: end-to-middle 4, middle-to-end 8, end-to-end 12.
        let map = GridMap::parse("c", "#####\n#...#\n#####").unwrap();
        assert!((diffusion_time_exact(&map).unwrap() - 8.0).abs() < 1e-12);
    }

    /// Independent route: iterate h <- 1 + P h on the absorbing chain.
    fn diffusion_by_iteration(map: &GridMap) -> f64 {
        let n = map.n_states();
        let mut total = 0.0;
        for target in 0..n {
            let mut h = vec![0.0; n];
            for _ in 0..200_000 {
                let mut next = vec![0.0; n];
                let mut delta = 0.0_f64;
                for i in (0..n).filter(|&i| i != target) {
                    next[i] = 1.0
                        + Action::ALL.iter().map(|&a| h[map.neighbor(StateId(i), a).0]).sum::<f64>() / 4.0;
                    delta = delta.max((next[i] - h[i]).abs());
                }
                h = next;
                if delta < 1e-11 {
                    break;
                }
            }
            total += h.iter().sum::<f64>();
        }
        total / (n * (n - 1)) as f64
    }

    #[test]
    fn exact_diffusion_matches_iteration_and_is_order_invariant() {
        let map = GridMap::parse("r", "#####\n#...#\n#.#.#\n#...#\n#####").unwrap();
        let exact = diffusion_time_exact(&map).unwrap();
        assert!((exact - diffusion_by_iteration(&map)).abs() < 1e-6);
        // A ring and its transpose: same graph, different enumeration order.
        let mirrored = GridMap::parse("m", "######\n#....#\n#.##.#\n#....#\n######").unwrap();
        let rot = GridMap::parse("m", "#####\n#...#\n#.#.#\n#.#.#\n#...#\n#####").unwrap();
        assert!((diffusion_time_exact(&mirrored).unwrap() - diffusion_time_exact(&rot).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn disconnected_map_is_rejected() {
        let map = GridMap::parse("d", "#####\n#.#.#\n#####").unwrap();
        assert!(matches!(diffusion_time_exact(&map), Err(MetricError::Disconnected(_))));
    }

    #[test]
    fn monte_carlo_agrees_with_exact_on_open_room() {
        let map = GridMap::parse("o", "#####\n#...#\n#...#\n#...#\n#####").unwrap();
        let env = Gridworld::new(map, MdpSpec::default()).unwrap();
        let exact = diffusion_time_exact(&env.map).unwrap();
        let est = diffusion_time_monte_carlo(&env, &OptionSet::primitives_only(), 20_000, 100_000, 20, &mut seeded(5)).unwrap();
        assert_eq!(est.truncated_fraction, 0.0);
        assert!((est.mean - exact).abs() < 3.0 * est.std_error, "{} vs {exact}", est.mean);
    }

    #[test]
    fn visitation_ground_truths() {
        let t = crate::ddo::test_support::trajectory(&[0, 1, 2, 3, 4], &[1, 1, 1, 1]);
        let one = visitation_counts(5, [&t]);
        assert!(one.distribution.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let two = visitation_counts(5, [&t, &t]);
        assert_eq!(one.distribution, two.distribution);
        assert_eq!(two.counts, vec![2; 5]);
    }

    #[test]
    fn report_text_mentions_every_metric() {
        let r = MetricReport {
            ce_error: 0.5,
            hinge_loss: 0.1,
            per_option_termination: vec![(0.5, 0.01)],
            option_time_fraction: 0.4,
            median_option_duration: 3.0,
            mean_option_duration: 3.5,
            durations_defined: true,
            success_rate: 1.0,
            diffusion_time: 12.0,
            mean_option_kl: 0.2,
            visitation: vec![],
        };
        assert!(r.is_valid());
        let text = r.to_text();
        for key in ["ce_error", "hinge_loss", "option_time_fraction", "diffusion_time", "mean_beta"] {
            assert!(text.contains(key));
        }
    }
}
