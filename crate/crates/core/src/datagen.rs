//! Offline dataset generation: behavior learners, rollouts, relabeling and
//! goal splits.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetQuality, TaskDataset, Transition};
use crate::envs::{grid, task_reward, GridLayout};
use crate::error::{CdsError, Result};
use crate::mdp::{argmax_lowest, exact_policy_evaluation, value_iteration, MultiTaskMdp, TabularPolicy};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Medium,
    Expert,
}

/// Tabular ε-greedy Q-learning settings for the behavior generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorConfig {
    pub epsilon: f64,
    pub learning_rate: f64,
    pub horizon: usize,
    pub max_episodes: usize,
    pub medium_fraction: f64,
    pub expert_fraction: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            epsilon: 0.3,
            learning_rate: 0.5,
            horizon: 30,
            max_episodes: 20_000,
            medium_fraction: 0.5,
            expert_fraction: 0.95,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(CdsError::config("behavior.epsilon", "must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(CdsError::config("behavior.learning_rate", "must lie in (0, 1]"));
        }
        if self.horizon == 0 {
            return Err(CdsError::config("behavior.horizon", "must be positive"));
        }
        if !(0.0 < self.medium_fraction && self.medium_fraction < self.expert_fraction && self.expert_fraction <= 1.0) {
            return Err(CdsError::config(
                "behavior.medium_fraction",
                "need 0 < medium_fraction < expert_fraction <= 1",
            ));
        }
        Ok(())
    }
}

/// Outcome of a behavior-learner run.
#[derive(Clone, Debug)]
pub struct BehaviorRun {
    /// Single-task policy at the requested stage.
    pub policy: TabularPolicy,
    /// Every transition the learner collected, in order.
    pub buffer: Vec<Transition>,
    pub episodes: usize,
    pub j: f64,
    pub j_star: f64,
    /// Mixing weight on the crossing snapshot when a medium policy was blended.
    pub blend: Option<f64>,
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // floating-point remainder: last index with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn greedy_policy(q: &[f64], num_states: usize, num_actions: usize) -> TabularPolicy {
    let actions: Vec<usize> = (0..num_states)
        .map(|s| argmax_lowest(&q[s * num_actions..(s + 1) * num_actions]))
        .collect();
    TabularPolicy::deterministic(num_actions, &[actions])
}

struct QLearner<'a> {
    mdp: &'a MultiTaskMdp,
    task: usize,
    cfg: &'a BehaviorConfig,
    q: Vec<f64>,
    rng: ChaCha8Rng,
    buffer: Vec<Transition>,
}

impl<'a> QLearner<'a> {
    fn new(mdp: &'a MultiTaskMdp, task: usize, cfg: &'a BehaviorConfig, seed: u64) -> Self {
        QLearner {
            mdp,
            task,
            cfg,
            q: vec![0.0; mdp.num_states * mdp.num_actions],
            rng: rng_from(seed),
            buffer: Vec::new(),
        }
    }

    fn episode(&mut self) {
        let (na, g) = (self.mdp.num_actions, self.mdp.discount);
        let mut s = sample_index(&mut self.rng, &self.mdp.initial_dist);
        for _ in 0..self.cfg.horizon {
            let a = if self.rng.gen::<f64>() < self.cfg.epsilon {
                self.rng.gen_range(0..na)
            } else {
                argmax_lowest(&self.q[s * na..(s + 1) * na])
            };
            let sn = sample_index(&mut self.rng, self.mdp.next_dist(s, a));
            let r = self.mdp.reward(self.task, s, a);
            let done = self.mdp.is_terminal(self.task, s);
            self.buffer.push(Transition::new(s, a, r, sn, done, self.task));
            let boot = if done {
                0.0
            } else {
                self.q[sn * na..(sn + 1) * na]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let idx = s * na + a;
            self.q[idx] += self.cfg.learning_rate * (r + g * boot - self.q[idx]);
            if done {
                break;
            }
            s = sn;
        }
    }

    fn greedy(&self) -> TabularPolicy {
        greedy_policy(&self.q, self.mdp.num_states, self.mdp.num_actions)
    }
}

/// Runs tabular Q-learning until the greedy policy reaches the stage target.
///
/// The medium policy is the first greedy snapshot whose return reaches
/// `medium_fraction · J*`. If that snapshot overshoots `1.2 · medium_fraction · J*`
/// it is blended with the previous snapshot (uniform if none) and the mixing
/// weight is bisected until the return equals the target.
pub fn train_behavior(mdp: &MultiTaskMdp, task: usize, stage: Stage, seed: u64, cfg: &BehaviorConfig) -> Result<BehaviorRun> {
    cfg.validate()?;
    let j_star = value_iteration(mdp, task, 1e-12)?.j_star(mdp);
    let fraction = match stage {
        Stage::Medium => cfg.medium_fraction,
        Stage::Expert => cfg.expert_fraction,
    };
    let target = fraction * j_star;
    let mut learner = QLearner::new(mdp, task, cfg, seed);
    let mut previous = TabularPolicy::uniform(1, mdp.num_states, mdp.num_actions);
    let mut j_previous = exact_policy_evaluation(mdp, &previous, task)?;
    for episode in 1..=cfg.max_episodes {
        learner.episode();
        let policy = learner.greedy();
        let j = exact_policy_evaluation(mdp, &policy, task)?;
        if j >= target {
            let mut run = BehaviorRun {
                policy,
                buffer: std::mem::take(&mut learner.buffer),
                episodes: episode,
                j,
                j_star,
                blend: None,
            };
            if stage == Stage::Medium && j > 1.2 * target && j_previous < target {
                let (lambda, mixed, jm) = bisect_blend(mdp, task, &run.policy, &previous, target)?;
                run.policy = mixed;
                run.j = jm;
                run.blend = Some(lambda);
            }
            return Ok(run);
        }
        previous = policy;
        j_previous = j;
    }
    Err(CdsError::TargetUnreachable(format!(
        "task {task}: greedy return {j_previous:.4} below {target:.4} after {} episodes",
        cfg.max_episodes
    )))
}

fn bisect_blend(
    mdp: &MultiTaskMdp,
    task: usize,
    high: &TabularPolicy,
    low: &TabularPolicy,
    target: f64,
) -> Result<(f64, TabularPolicy, f64)> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let j = exact_policy_evaluation(mdp, &high.mix(low, mid), task)?;
        if j >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let policy = high.mix(low, hi);
    let j = exact_policy_evaluation(mdp, &policy, task)?;
    Ok((hi, policy, j))
}

/// Samples one episode of at most `horizon` steps, stopping at a terminal state.
pub fn rollout_episode(
    mdp: &MultiTaskMdp,
    policy: &TabularPolicy,
    task: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Transition> {
    let pt = if policy.num_tasks == 1 { 0 } else { task };
    let mut out = Vec::new();
    let mut s = sample_index(rng, &mdp.initial_dist);
    for _ in 0..horizon {
        let a = sample_index(rng, policy.row(pt, s));
        let sn = sample_index(rng, mdp.next_dist(s, a));
        let done = mdp.is_terminal(task, s);
        out.push(Transition::new(s, a, mdp.reward(task, s, a), sn, done, task));
        if done {
            break;
        }
        s = sn;
    }
    out
}

/// Episodic rollouts from the initial distribution, cut to exactly
/// `num_transitions` transitions.
pub fn rollout_policy(
    mdp: &MultiTaskMdp,
    policy: &TabularPolicy,
    task: usize,
    num_transitions: usize,
    horizon: usize,
    quality: DatasetQuality,
    seed: u64,
) -> Result<TaskDataset> {
    if horizon == 0 {
        return Err(CdsError::config("horizon", "must be positive"));
    }
    mdp.check_indices(task, 0, 0)?;
    policy.validate()?;
    let mut rng = rng_from(seed);
    let mut transitions = Vec::with_capacity(num_transitions);
    while transitions.len() < num_transitions {
        let ep = rollout_episode(mdp, policy, task, horizon, &mut rng);
        let room = num_transitions - transitions.len();
        transitions.extend(ep.into_iter().take(room));
    }
    let behavior = format!("rollout of a {} policy, horizon {horizon}", quality.label());
    Ok(TaskDataset::new(task, transitions, quality, seed, behavior))
}

/// Rollouts of a stage policy trained by [`train_behavior`].
pub fn make_stage_dataset(
    mdp: &MultiTaskMdp,
    task: usize,
    stage: Stage,
    size: usize,
    seed: u64,
    cfg: &BehaviorConfig,
) -> Result<TaskDataset> {
    let run = train_behavior(mdp, task, stage, seed, cfg)?;
    let quality = match stage {
        Stage::Medium => DatasetQuality::Medium,
        Stage::Expert => DatasetQuality::Expert,
    };
    let mut ds = rollout_policy(mdp, &run.policy, task, size, cfg.horizon, quality, seed ^ 0x5eed)?;
    ds.manifest.seed = seed;
    ds.manifest.behavior = format!(
        "{} q-learning policy after {} episodes, J = {:.6} of J* = {:.6}",
        quality.label(),
        run.episodes,
        run.j,
        run.j_star
    );
    Ok(ds)
}

/// The first `size` transitions of an ε-greedy Q-learner's replay buffer.
pub fn make_medium_replay(mdp: &MultiTaskMdp, task: usize, seed: u64, size: usize, cfg: &BehaviorConfig) -> Result<TaskDataset> {
    cfg.validate()?;
    mdp.check_indices(task, 0, 0)?;
    let mut learner = QLearner::new(mdp, task, cfg, seed);
    let mut episodes = 0;
    while learner.buffer.len() < size && episodes < cfg.max_episodes {
        learner.episode();
        episodes += 1;
    }
    if learner.buffer.len() < size {
        return Err(CdsError::BufferTooSmall {
            available: learner.buffer.len(),
            requested: size,
        });
    }
    learner.buffer.truncate(size);
    let behavior = format!(
        "replay buffer of epsilon-greedy q-learning (epsilon {}, {episodes} episodes)",
        cfg.epsilon
    );
    Ok(TaskDataset::new(task, learner.buffer, DatasetQuality::MediumReplay, seed, behavior))
}

/// Same `(s, a, s')` with reward and done flag recomputed for `target`.
pub fn relabel(t: &Transition, target: usize, mdp: &MultiTaskMdp) -> Result<Transition> {
    Ok(Transition {
        r: task_reward(mdp, target, t.s, t.a)?,
        done: mdp.is_terminal(target, t.s),
        ..*t
    })
}

pub type Trajectory = Vec<Transition>;

/// Task-agnostic "play" data on a grid: the agent walks shortest paths toward
/// random waypoints and takes a uniformly random action with probability `noise`.
///
/// Transitions carry rewards of task 0 until a split relabels them.
pub fn play_trajectories(
    mdp: &MultiTaskMdp,
    layout: &GridLayout,
    num_trajectories: usize,
    horizon: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if mdp.num_states != layout.cells.len() {
        return Err(CdsError::InvalidSpec("layout does not match MDP".into()));
    }
    let mut rng = rng_from(seed);
    let ns = mdp.num_states;
    let dist_to: Vec<Vec<Option<usize>>> = (0..ns).map(|w| layout.bfs(w)).collect();
    let mut out = Vec::with_capacity(num_trajectories);
    for _ in 0..num_trajectories {
        let mut s = sample_index(&mut rng, &mdp.initial_dist);
        let mut waypoint = rng.gen_range(0..ns);
        let mut traj = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            while waypoint == s {
                waypoint = rng.gen_range(0..ns);
            }
            let a = if rng.gen::<f64>() < noise {
                rng.gen_range(0..grid::NUM_ACTIONS)
            } else {
                // moves are symmetric, so distance to the waypoint equals distance from it
                let here = dist_to[waypoint][s].unwrap_or(usize::MAX);
                let best: Vec<usize> = (0..grid::NUM_ACTIONS)
                    .filter(|&a| dist_to[waypoint][layout.step(s, a)].is_some_and(|d| d < here))
                    .collect();
                *best.choose(&mut rng).unwrap_or(&0)
            };
            let sn = sample_index(&mut rng, mdp.next_dist(s, a));
            traj.push(Transition::new(s, a, mdp.reward(0, s, a), sn, mdp.is_terminal(0, s), 0));
            s = sn;
        }
        out.push(traj);
    }
    Ok(out)
}

fn relabel_trajectories(trajs: &[&Trajectory], task: usize, mdp: &MultiTaskMdp) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for traj in trajs {
        for t in traj.iter() {
            let mut r = relabel(t, task, mdp)?;
            r.origin_task = task;
            out.push(r);
        }
    }
    Ok(out)
}

/// Random equal partition of trajectories across tasks, each part relabeled to
/// the task it is assigned to.
pub fn split_undirected(trajectories: &[Trajectory], mdp: &MultiTaskMdp, seed: u64) -> Result<Vec<TaskDataset>> {
    if trajectories.is_empty() {
        return Err(CdsError::EmptyDataset("no trajectories to split".into()));
    }
    let n = mdp.num_tasks;
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    order.shuffle(&mut rng_from(seed));
    let mut parts: Vec<Vec<&Trajectory>> = vec![Vec::new(); n];
    for (k, idx) in order.into_iter().enumerate() {
        parts[k % n].push(&trajectories[idx]);
    }
    parts
        .iter()
        .enumerate()
        .map(|(task, part)| {
            let ts = relabel_trajectories(part, task, mdp)?;
            let behavior = format!("{} play trajectories, random equal split", part.len());
            Ok(TaskDataset::new(task, ts, DatasetQuality::UndirectedSplit, seed, behavior))
        })
        .collect()
}

/// Assigns every trajectory to the goal nearest (Chebyshev) to its final state,
/// ties to the lowest task id.
pub fn split_directed(
    trajectories: &[Trajectory],
    mdp: &MultiTaskMdp,
    layout: &GridLayout,
    goals: &[(usize, usize)],
) -> Result<Vec<TaskDataset>> {
    if trajectories.is_empty() {
        return Err(CdsError::EmptyDataset("no trajectories to split".into()));
    }
    if goals.len() != mdp.num_tasks {
        return Err(CdsError::InvalidSpec(format!("{} goals for {} tasks", goals.len(), mdp.num_tasks)));
    }
    let mut parts: Vec<Vec<&Trajectory>> = vec![Vec::new(); goals.len()];
    for traj in trajectories {
        let last = traj
            .last()
            .ok_or_else(|| CdsError::EmptyDataset("empty trajectory".into()))?;
        parts[nearest_goal(layout, last.s_next, goals)].push(traj);
    }
    parts
        .iter()
        .enumerate()
        .map(|(task, part)| {
            let ts = relabel_trajectories(part, task, mdp)?;
            let behavior = format!("{} play trajectories ending nearest goal {task}", part.len());
            Ok(TaskDataset::new(task, ts, DatasetQuality::DirectedSplit, 0, behavior))
        })
        .collect()
}

pub fn nearest_goal(layout: &GridLayout, state: usize, goals: &[(usize, usize)]) -> usize {
    let (x, y) = layout.cell_of(state);
    let mut best = 0;
    let mut best_d = usize::MAX;
    for (i, &(gx, gy)) in goals.iter().enumerate() {
        let d = x.abs_diff(gx).max(y.abs_diff(gy));
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{
        build_corridor_tritask, build_multigoal_grid, corridor, CorridorTriTaskSpec, MultiGoalGridSpec,
    };

    fn corridor_mdp(slip: f64) -> MultiTaskMdp {
        build_corridor_tritask(&CorridorTriTaskSpec {
            length: 9,
            jump_cell: 6,
            slip,
            discount: 0.9,
            start: None,
        })
        .unwrap()
    }

    fn grid_spec() -> MultiGoalGridSpec {
        MultiGoalGridSpec {
            width: 5,
            height: 5,
            walls: vec![],
            goals: vec![(0, 0), (4, 0), (4, 4)],
            goal_radius: 0,
            start: (2, 2),
            slip: 0.0,
            discount: 0.9,
        }
    }

    #[test]
    fn expert_matches_optimal_actions_on_visited_states() {
        let m = corridor_mdp(0.0);
        let cfg = BehaviorConfig::default();
        let run = train_behavior(&m, corridor::FORWARD, Stage::Expert, 3, &cfg).unwrap();
        assert!(run.j >= 0.95 * run.j_star);
        let sol = value_iteration(&m, corridor::FORWARD, 1e-13).unwrap();
        let ds = rollout_policy(&m, &run.policy, corridor::FORWARD, 200, 30, DatasetQuality::Expert, 1).unwrap();
        for t in &ds.transitions {
            let optimal = sol.optimal_actions(m.num_actions, t.s, 1e-9);
            assert!(optimal.contains(&t.a), "state {} action {}", t.s, t.a);
        }
    }

    #[test]
    fn medium_return_within_band() {
        let m = corridor_mdp(0.1);
        let cfg = BehaviorConfig::default();
        for task in 0..3 {
            for seed in 0..4 {
                let run = train_behavior(&m, task, Stage::Medium, seed, &cfg).unwrap();
                assert!(run.j >= 0.4 * run.j_star - 1e-9 && run.j <= 0.6 * run.j_star + 1e-9, "task {task} seed {seed}: {} of {}", run.j, run.j_star);
            }
        }
    }

    #[test]
    fn same_seed_same_buffer() {
        let m = corridor_mdp(0.1);
        let cfg = BehaviorConfig::default();
        let a = make_medium_replay(&m, 0, 11, 500, &cfg).unwrap();
        let b = make_medium_replay(&m, 0, 11, 500, &cfg).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let r1 = train_behavior(&m, 1, Stage::Medium, 5, &cfg).unwrap();
        let r2 = train_behavior(&m, 1, Stage::Medium, 5, &cfg).unwrap();
        assert_eq!(r1.buffer, r2.buffer);
        assert_eq!(r1.policy, r2.policy);
    }

    #[test]
    fn optimal_grid_rollouts_reach_goal() {
        let (m, _) = build_multigoal_grid(&grid_spec()).unwrap();
        let sol = value_iteration(&m, 2, 1e-13).unwrap();
        let pi = TabularPolicy::deterministic(m.num_actions, &[sol.greedy_actions(m.num_actions)]);
        let ds = rollout_policy(&m, &pi, 2, 50, 20, DatasetQuality::Expert, 0).unwrap();
        // every complete episode ends with done at the goal
        let dones: Vec<usize> = ds.transitions.iter().enumerate().filter(|(_, t)| t.done).map(|(i, _)| i).collect();
        assert!(!dones.is_empty());
        let mut start = 0;
        for d in dones {
            assert_eq!(d - start, 4, "4 moves then the rewarded goal step");
            assert_eq!(ds.transitions[d].r, 1.0);
            start = d + 1;
        }
    }

    #[test]
    fn zero_transitions_is_empty() {
        let m = corridor_mdp(0.1);
        let pi = TabularPolicy::uniform(1, m.num_states, m.num_actions);
        assert!(rollout_policy(&m, &pi, 0, 0, 10, DatasetQuality::Medium, 0).unwrap().is_empty());
    }

    #[test]
    fn rollout_rewards_match_oracle() {
        let m = corridor_mdp(0.1);
        let pi = TabularPolicy::uniform(1, m.num_states, m.num_actions);
        for task in 0..3 {
            let ds = rollout_policy(&m, &pi, task, 300, 15, DatasetQuality::Medium, task as u64).unwrap();
            assert_eq!(ds.len(), 300);
            for t in &ds.transitions {
                assert_eq!(t.r.to_bits(), task_reward(&m, task, t.s, t.a).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn replay_buffer_is_diverse() {
        let m = corridor_mdp(0.1);
        let ds = make_medium_replay(&m, 0, 2, 3000, &BehaviorConfig::default()).unwrap();
        assert_eq!(ds.manifest.quality, DatasetQuality::MediumReplay);
        let mut counts = vec![[0usize; 4]; m.num_states];
        for t in &ds.transitions {
            counts[t.s][t.a] += 1;
        }
        for row in counts.iter().filter(|r| r.iter().sum::<usize>() >= 50) {
            assert!(row.iter().filter(|c| **c > 0).count() >= 2);
        }
    }

    #[test]
    fn replay_larger_than_buffer_fails() {
        let m = corridor_mdp(0.1);
        let cfg = BehaviorConfig {
            max_episodes: 3,
            ..BehaviorConfig::default()
        };
        assert!(matches!(
            make_medium_replay(&m, 0, 0, 10_000, &cfg),
            Err(CdsError::BufferTooSmall { requested: 10_000, .. })
        ));
    }

    #[test]
    fn relabel_cases() {
        let m = corridor_mdp(0.0);
        let t = Transition::new(3, corridor::RIGHT, 1.0, 4, false, corridor::FORWARD);
        assert_eq!(relabel(&t, corridor::FORWARD, &m).unwrap(), t);
        let back = relabel(&t, corridor::BACKWARD, &m).unwrap();
        assert_eq!((back.r, back.origin_task, back.s_next), (0.0, corridor::FORWARD, 4));

        let (g, layout) = build_multigoal_grid(&grid_spec()).unwrap();
        let goal = layout.state_of((4, 4)).unwrap();
        let t = Transition::new(goal, grid::UP, 0.0, goal, false, 0);
        let r = relabel(&t, 2, &g).unwrap();
        assert_eq!((r.r, r.done), (1.0, true));
        assert_eq!(relabel(&r, 2, &g).unwrap(), r);
    }

    #[test]
    fn undirected_split_partitions() {
        let (m, layout) = build_multigoal_grid(&MultiGoalGridSpec {
            goals: vec![(0, 0), (4, 0), (4, 4), (0, 4), (2, 0), (0, 2), (4, 2)],
            ..grid_spec()
        })
        .unwrap();
        let trajs = play_trajectories(&m, &layout, 14, 10, 0.2, 4).unwrap();
        let parts = split_undirected(&trajs, &m, 9).unwrap();
        assert_eq!(parts.len(), 7);
        for p in &parts {
            assert_eq!(p.len(), 20);
            for t in &p.transitions {
                assert_eq!(t.r, task_reward(&m, p.task, t.s, t.a).unwrap());
                assert_eq!(t.origin_task, p.task);
            }
        }
        let key = |t: &Transition| (t.s, t.a, t.s_next);
        let mut all: Vec<_> = parts.iter().flat_map(|p| p.transitions.iter().map(key)).collect();
        let mut input: Vec<_> = trajs.iter().flatten().map(key).collect();
        all.sort();
        input.sort();
        assert_eq!(all, input);
        assert_eq!(split_undirected(&trajs, &m, 9).unwrap(), parts);
    }

    #[test]
    fn directed_split_nearest_goal() {
        let spec = MultiGoalGridSpec {
            width: 7,
            height: 5,
            goals: vec![(0, 0), (2, 2), (6, 0), (3, 4), (4, 2)],
            start: (0, 4),
            ..grid_spec()
        };
        let (m, layout) = build_multigoal_grid(&spec).unwrap();
        let end_at = |cell| {
            let s = layout.state_of(cell).unwrap();
            vec![Transition::new(s, 0, 0.0, s, false, 0)]
        };
        // (3, 2) is one step from goals 1 and 4
        let trajs = vec![end_at((3, 4)), end_at((3, 2)), end_at((6, 1))];
        let parts = split_directed(&trajs, &m, &layout, &spec.goals).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![0, 1, 1, 1, 0]);
        assert_eq!(parts[3].transitions[0].s, layout.state_of((3, 4)).unwrap());
        assert_eq!(parts[1].transitions[0].s, layout.state_of((3, 2)).unwrap());
    }
}
