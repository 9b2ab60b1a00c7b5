//! Concrete multi-task environments.
//!
//! * A tri-task corridor (forward / backward / jump) with dense rewards.
//! * A multi-goal grid with sparse `+1` rewards and termination at the goal.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{CdsError, Result};
use crate::mdp::MultiTaskMdp;

pub mod corridor {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;
    pub const HOP: usize = 2;
    pub const STAY: usize = 3;
    pub const NUM_ACTIONS: usize = 4;

    pub const FORWARD: usize = 0;
    pub const BACKWARD: usize = 1;
    pub const JUMP: usize = 2;
    pub const TASK_NAMES: [&str; 3] = ["forward", "backward", "jump"];
}

pub mod grid {
    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const LEFT: usize = 2;
    pub const RIGHT: usize = 3;
    pub const NUM_ACTIONS: usize = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorTriTaskSpec {
    pub length: usize,
    /// Cell where `hop` is rewarded for the jump task.
    pub jump_cell: usize,
    /// Probability that a left/right move leaves the agent in place.
    #[serde(default = "default_slip")]
    pub slip: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    /// Start cell; defaults to the middle of the corridor.
    #[serde(default)]
    pub start: Option<usize>,
}

fn default_slip() -> f64 {
    0.1
}

fn default_discount() -> f64 {
    0.9
}

impl CorridorTriTaskSpec {
    pub fn start_cell(&self) -> usize {
        self.start.unwrap_or(self.length / 2)
    }
}

/// Forward is rewarded for every `right` taken left of the wall and ends at the
/// right wall, backward mirrors it, and jump is rewarded only for `hop` at
/// `jump_cell`.
pub fn build_corridor_tritask(spec: &CorridorTriTaskSpec) -> Result<MultiTaskMdp> {
    use corridor::*;
    let n = spec.length;
    if n < 3 {
        return Err(CdsError::InvalidSpec(format!("corridor length {n} < 3")));
    }
    if !(0.0..0.5).contains(&spec.slip) {
        return Err(CdsError::InvalidSpec(format!("slip {} outside [0, 0.5)", spec.slip)));
    }
    if spec.jump_cell >= n {
        return Err(CdsError::InvalidSpec(format!("jump cell {} outside corridor", spec.jump_cell)));
    }
    let start = spec.start_cell();
    if start >= n {
        return Err(CdsError::InvalidSpec(format!("start cell {start} outside corridor")));
    }
    let na = NUM_ACTIONS;
    let mut transition = vec![0.0; n * na * n];
    for s in 0..n {
        for a in 0..na {
            let row = &mut transition[(s * na + a) * n..(s * na + a + 1) * n];
            let target = match a {
                LEFT => s.saturating_sub(1),
                RIGHT => (s + 1).min(n - 1),
                _ => s,
            };
            if target == s {
                row[s] = 1.0;
            } else {
                row[target] = 1.0 - spec.slip;
                row[s] = spec.slip;
            }
        }
    }
    let mut rewards = vec![0.0; 3 * n * na];
    for s in 0..n {
        if s + 1 < n {
            rewards[(FORWARD * n + s) * na + RIGHT] = 1.0;
        }
        if s > 0 {
            rewards[(BACKWARD * n + s) * na + LEFT] = 1.0;
        }
    }
    rewards[(JUMP * n + spec.jump_cell) * na + HOP] = 1.0;

    let mut terminal = vec![false; 3 * n];
    terminal[FORWARD * n + n - 1] = true;
    terminal[BACKWARD * n] = true;

    let mut initial = vec![0.0; n];
    initial[start] = 1.0;
    MultiTaskMdp::new(n, na, 3, transition, rewards, spec.discount, initial, terminal)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiGoalGridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<(usize, usize)>,
    /// One task per goal, as `(x, y)` cells.
    pub goals: Vec<(usize, usize)>,
    /// Chebyshev radius of each goal region.
    #[serde(default)]
    pub goal_radius: usize,
    pub start: (usize, usize),
    #[serde(default)]
    pub slip: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

/// Mapping between free grid cells and state ids (row-major over free cells).
#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
}

impl GridLayout {
    pub fn new(spec: &MultiGoalGridSpec) -> Self {
        let walls: std::collections::HashSet<_> = spec.walls.iter().copied().collect();
        let mut cells = Vec::new();
        let mut index = HashMap::new();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if !walls.contains(&(x, y)) {
                    index.insert((x, y), cells.len());
                    cells.push((x, y));
                }
            }
        }
        GridLayout {
            width: spec.width,
            height: spec.height,
            cells,
            index,
        }
    }

    pub fn state_of(&self, cell: (usize, usize)) -> Option<usize> {
        self.index.get(&cell).copied()
    }

    pub fn cell_of(&self, state: usize) -> (usize, usize) {
        self.cells[state]
    }

    pub fn chebyshev(&self, a: usize, b: usize) -> usize {
        let (ax, ay) = self.cells[a];
        let (bx, by) = self.cells[b];
        ax.abs_diff(bx).max(ay.abs_diff(by))
    }

    /// Deterministic successor of a move, staying put at walls and borders.
    pub fn step(&self, state: usize, action: usize) -> usize {
        let (x, y) = self.cells[state];
        let target = match action {
            grid::UP if y > 0 => Some((x, y - 1)),
            grid::DOWN if y + 1 < self.height => Some((x, y + 1)),
            grid::LEFT if x > 0 => Some((x - 1, y)),
            grid::RIGHT if x + 1 < self.width => Some((x + 1, y)),
            _ => None,
        };
        target.and_then(|c| self.state_of(c)).unwrap_or(state)
    }

    /// Breadth-first move distances from `from` to every state.
    pub fn bfs(&self, from: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cells.len()];
        dist[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(s) = queue.pop_front() {
            let d = dist[s].unwrap();
            for a in 0..grid::NUM_ACTIONS {
                let t = self.step(s, a);
                if dist[t].is_none() {
                    dist[t] = Some(d + 1);
                    queue.push_back(t);
                }
            }
        }
        dist
    }
}

/// Builds the grid MDP together with its layout.
pub fn build_multigoal_grid(spec: &MultiGoalGridSpec) -> Result<(MultiTaskMdp, GridLayout)> {
    if spec.width == 0 || spec.height == 0 {
        return Err(CdsError::InvalidSpec("grid dimensions must be positive".into()));
    }
    if spec.goals.is_empty() {
        return Err(CdsError::InvalidSpec("grid needs at least one goal".into()));
    }
    if !(0.0..1.0).contains(&spec.slip) {
        return Err(CdsError::InvalidSpec(format!("slip {} outside [0, 1)", spec.slip)));
    }
    let layout = GridLayout::new(spec);
    let start = layout
        .state_of(spec.start)
        .ok_or_else(|| CdsError::InvalidSpec(format!("start {:?} is a wall or outside the grid", spec.start)))?;
    let reach = layout.bfs(start);
    let mut goal_states = Vec::with_capacity(spec.goals.len());
    for (i, g) in spec.goals.iter().enumerate() {
        let gs = layout
            .state_of(*g)
            .ok_or_else(|| CdsError::InvalidSpec(format!("goal {i} at {g:?} is a wall or outside the grid")))?;
        if reach[gs].is_none() {
            return Err(CdsError::InvalidSpec(format!("goal {i} at {g:?} is unreachable from the start")));
        }
        goal_states.push(gs);
    }

    let ns = layout.cells.len();
    let na = grid::NUM_ACTIONS;
    let nt = spec.goals.len();
    let mut transition = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            let t = layout.step(s, a);
            let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
            if t == s {
                row[s] = 1.0;
            } else {
                row[t] = 1.0 - spec.slip;
                row[s] += spec.slip;
            }
        }
    }
    let mut rewards = vec![0.0; nt * ns * na];
    let mut terminal = vec![false; nt * ns];
    for (task, &g) in goal_states.iter().enumerate() {
        for s in 0..ns {
            if layout.chebyshev(s, g) <= spec.goal_radius {
                terminal[task * ns + s] = true;
                for a in 0..na {
                    rewards[(task * ns + s) * na + a] = 1.0;
                }
            }
        }
    }
    let mut initial = vec![0.0; ns];
    initial[start] = 1.0;
    let mdp = MultiTaskMdp::new(ns, na, nt, transition, rewards, spec.discount, initial, terminal)?;
    Ok((mdp, layout))
}

/// Skill label per task; relabeling under skill routing stays within a label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillTag {
    labels: Vec<String>,
}

impl SkillTag {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.iter().any(|l| l.is_empty()) {
            return Err(CdsError::InvalidSpec("skill labels must be non-empty".into()));
        }
        Ok(SkillTag { labels })
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.len()
    }

    pub fn skill(&self, task: usize) -> Option<&str> {
        self.labels.get(task).map(String::as_str)
    }
}

/// Reward oracle used for relabeling.
pub fn task_reward(mdp: &MultiTaskMdp, task: usize, state: usize, action: usize) -> Result<f64> {
    mdp.check_indices(task, state, action)?;
    Ok(mdp.reward(task, state, action))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::value_iteration;

    fn corridor(slip: f64) -> MultiTaskMdp {
        build_corridor_tritask(&CorridorTriTaskSpec {
            length: 10,
            jump_cell: 7,
            slip,
            discount: 0.9,
            start: None,
        })
        .unwrap()
    }

    #[test]
    fn deterministic_corridor_rewards() {
        let m = corridor(0.0);
        assert_eq!(task_reward(&m, corridor::FORWARD, 3, corridor::RIGHT).unwrap(), 1.0);
        assert_eq!(task_reward(&m, corridor::FORWARD, 3, corridor::LEFT).unwrap(), 0.0);
        assert_eq!(m.next_dist(3, corridor::RIGHT)[4], 1.0);
        assert!(m.is_deterministic());
    }

    #[test]
    fn slip_splits_moves() {
        let m = corridor(0.1);
        let row = m.next_dist(3, corridor::RIGHT);
        assert!((row[4] - 0.9).abs() < 1e-15 && (row[3] - 0.1).abs() < 1e-15);
        assert_eq!(m.next_dist(3, corridor::HOP)[3], 1.0);
    }

    #[test]
    fn jump_reward_only_at_jump_cell() {
        let m = corridor(0.1);
        for s in 0..10 {
            for a in 0..corridor::NUM_ACTIONS {
                let expected = if s == 7 && a == corridor::HOP { 1.0 } else { 0.0 };
                assert_eq!(m.reward(corridor::JUMP, s, a), expected);
            }
        }
    }

    #[test]
    fn short_corridor_rejected() {
        let spec = CorridorTriTaskSpec {
            length: 2,
            jump_cell: 0,
            slip: 0.0,
            discount: 0.9,
            start: None,
        };
        assert!(build_corridor_tritask(&spec).is_err());
    }

    fn open_grid(radius: usize) -> (MultiTaskMdp, GridLayout) {
        build_multigoal_grid(&MultiGoalGridSpec {
            width: 5,
            height: 5,
            walls: vec![],
            goals: vec![(4, 4)],
            goal_radius: radius,
            start: (0, 0),
            slip: 0.0,
            discount: 0.9,
        })
        .unwrap()
    }

    #[test]
    fn grid_value_is_discounted_shortest_path() {
        for radius in [0, 1] {
            let (m, layout) = open_grid(radius);
            let sol = value_iteration(&m, 0, 1e-13).unwrap();
            for s in 0..m.num_states {
                // moves needed to enter the goal region
                let (x, y) = layout.cell_of(s);
                let moves = (4 - x).saturating_sub(radius) + (4 - y).saturating_sub(radius);
                assert!((sol.values[s] - 0.9f64.powi(moves as i32)).abs() < 1e-10, "state {s}");
            }
            if radius == 1 {
                // Chebyshev distance d along an edge is d - 1 moves from the region
                let s = layout.state_of((0, 4)).unwrap();
                assert!((sol.values[s] - 0.9f64.powi(4 - 1)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn goal_region_rewarded_and_terminal() {
        let (m, layout) = open_grid(1);
        let inside = layout.state_of((3, 3)).unwrap();
        let outside = layout.state_of((2, 2)).unwrap();
        for a in 0..grid::NUM_ACTIONS {
            assert_eq!(task_reward(&m, 0, inside, a).unwrap(), 1.0);
            assert_eq!(task_reward(&m, 0, outside, a).unwrap(), 0.0);
        }
        assert!(m.is_terminal(0, inside));
        assert!(!m.is_terminal(0, outside));
    }

    #[test]
    fn walled_off_goal_rejected() {
        let spec = MultiGoalGridSpec {
            width: 5,
            height: 5,
            walls: vec![(3, 4), (3, 3), (4, 3)],
            goals: vec![(4, 4)],
            goal_radius: 0,
            start: (0, 0),
            slip: 0.0,
            discount: 0.9,
        };
        assert!(matches!(build_multigoal_grid(&spec), Err(CdsError::InvalidSpec(_))));
    }

    #[test]
    fn out_of_range_reward_lookup() {
        let m = corridor(0.0);
        assert!(task_reward(&m, 3, 0, 0).is_err());
        assert!(task_reward(&m, 0, 10, 0).is_err());
        assert!(task_reward(&m, 0, 0, 4).is_err());
    }

    #[test]
    fn tasks_share_dynamics() {
        // one kernel by construction; spot-check that terminals differ but rewards index by task
        let m = corridor(0.1);
        assert!(m.is_terminal(corridor::FORWARD, 9) && !m.is_terminal(corridor::JUMP, 9));
    }
}
