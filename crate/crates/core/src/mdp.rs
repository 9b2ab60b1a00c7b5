//! Tabular multi-task MDPs and exact solvers.
//!
//! All tasks share one transition kernel and differ in their reward tables and
//! terminal predicates. A terminal state ends the episode after the reward of
//! the action taken there has been collected, so the Bellman operator for task
//! `i` reads `R_i(s,a) + γ (1 - term_i(s)) Σ P(s'|s,a) V(s')`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Transition;
use crate::error::{CdsError, Result};

/// Row-sum tolerance for probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Largest state count solved with a dense linear system.
pub const DIRECT_SOLVE_MAX_STATES: usize = 500;

const ITERATIVE_TOL: f64 = 1e-10;
const ITERATIVE_MAX_ITERS: usize = 1_000_000;

pub const MDP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub num_tasks: usize,
    /// Dense `[s][a][s']`, row-major.
    pub transition: Vec<f64>,
    /// Dense `[task][s][a]`, row-major.
    pub rewards: Vec<f64>,
    pub discount: f64,
    pub initial_dist: Vec<f64>,
    /// Dense `[task][s]`.
    pub terminal: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptyDimension(&'static str),
    ShapeMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    RowSum {
        state: usize,
        action: usize,
    },
    NegativeProbability {
        state: usize,
        action: usize,
        next: usize,
    },
    NonFiniteReward {
        task: usize,
        state: usize,
        action: usize,
    },
    Discount,
    InitialDist,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyDimension(name) => write!(f, "{name} must be positive"),
            Violation::ShapeMismatch {
                field,
                expected,
                found,
            } => write!(f, "{field} has length {found}, expected {expected}"),
            Violation::RowSum { state, action } => {
                write!(f, "transition row (s={state}, a={action}) does not sum to 1")
            }
            Violation::NegativeProbability {
                state,
                action,
                next,
            } => write!(f, "transition (s={state}, a={action}) -> {next} is negative"),
            Violation::NonFiniteReward {
                task,
                state,
                action,
            } => write!(f, "reward (task={task}, s={state}, a={action}) is not finite"),
            Violation::Discount => write!(f, "discount must lie in [0, 1)"),
            Violation::InitialDist => write!(f, "initial distribution is not on the simplex"),
        }
    }
}

/// Every structural invariant an MDP violates. Empty iff the MDP is valid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

fn on_simplex(row: &[f64]) -> bool {
    row.iter().all(|p| *p >= 0.0 && p.is_finite())
        && (row.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

impl MultiTaskMdp {
    /// Builds an MDP and rejects it unless every invariant holds.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        num_tasks: usize,
        transition: Vec<f64>,
        rewards: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let mdp = MultiTaskMdp {
            num_states,
            num_actions,
            num_tasks,
            transition,
            rewards,
            discount,
            initial_dist,
            terminal,
        };
        let report = mdp.validate();
        if report.is_valid() {
            Ok(mdp)
        } else {
            Err(CdsError::InvalidMdp(report.to_string()))
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        for (name, n) in [
            ("num_states", self.num_states),
            ("num_actions", self.num_actions),
            ("num_tasks", self.num_tasks),
        ] {
            if n == 0 {
                violations.push(Violation::EmptyDimension(name));
            }
        }
        let (s, a, n) = (self.num_states, self.num_actions, self.num_tasks);
        let shapes = [
            ("transition", s * a * s, self.transition.len()),
            ("rewards", n * s * a, self.rewards.len()),
            ("initial_dist", s, self.initial_dist.len()),
            ("terminal", n * s, self.terminal.len()),
        ];
        let mut shapes_ok = true;
        for (field, expected, found) in shapes {
            if expected != found {
                shapes_ok = false;
                violations.push(Violation::ShapeMismatch {
                    field,
                    expected,
                    found,
                });
            }
        }
        if !(0.0..1.0).contains(&self.discount) {
            violations.push(Violation::Discount);
        }
        if !shapes_ok {
            return ValidationReport { violations };
        }
        for state in 0..s {
            for action in 0..a {
                let row = self.next_dist(state, action);
                if let Some(next) = row.iter().position(|p| *p < 0.0) {
                    violations.push(Violation::NegativeProbability {
                        state,
                        action,
                        next,
                    });
                }
                if (row.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
                    || row.iter().any(|p| !p.is_finite())
                {
                    violations.push(Violation::RowSum { state, action });
                }
            }
        }
        for task in 0..n {
            for state in 0..s {
                for action in 0..a {
                    if !self.reward(task, state, action).is_finite() {
                        violations.push(Violation::NonFiniteReward {
                            task,
                            state,
                            action,
                        });
                    }
                }
            }
        }
        if !on_simplex(&self.initial_dist) {
            violations.push(Violation::InitialDist);
        }
        ValidationReport { violations }
    }

    #[inline]
    pub fn next_dist(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, task: usize, state: usize, action: usize) -> f64 {
        self.rewards[(task * self.num_states + state) * self.num_actions + action]
    }

    #[inline]
    pub fn is_terminal(&self, task: usize, state: usize) -> bool {
        self.terminal[task * self.num_states + state]
    }

    pub fn check_indices(&self, task: usize, state: usize, action: usize) -> Result<()> {
        if task >= self.num_tasks || state >= self.num_states || action >= self.num_actions {
            return Err(CdsError::OutOfRange(format!(
                "(task={task}, s={state}, a={action}) for MDP with {} tasks, {} states, {} actions",
                self.num_tasks, self.num_states, self.num_actions
            )));
        }
        Ok(())
    }

    /// Largest absolute reward across all tasks.
    pub fn r_max(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn r_min(&self) -> f64 {
        self.rewards.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn task_r_max(&self, task: usize) -> f64 {
        let n = self.num_states * self.num_actions;
        self.rewards[task * n..(task + 1) * n]
            .iter()
            .fold(0.0, |m, r| m.max(r.abs()))
    }

    /// True when the transition kernel of every (s, a) is a point mass.
    pub fn is_deterministic(&self) -> bool {
        self.transition.iter().all(|p| *p == 0.0 || *p == 1.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MdpDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        if doc.version != MDP_FORMAT_VERSION {
            return Err(CdsError::Format(format!(
                "unsupported MDP document version {}",
                doc.version
            )));
        }
        MultiTaskMdp::new(
            doc.states,
            doc.actions,
            doc.tasks,
            doc.transition,
            doc.rewards,
            doc.discount,
            doc.initial_dist,
            doc.terminal,
        )
    }
}

/// Versioned on-disk form of an MDP.
#[derive(Serialize, Deserialize)]
struct MdpDocument {
    version: u32,
    states: usize,
    actions: usize,
    tasks: usize,
    transition: Vec<f64>,
    rewards: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
}

impl From<&MultiTaskMdp> for MdpDocument {
    fn from(m: &MultiTaskMdp) -> Self {
        MdpDocument {
            version: MDP_FORMAT_VERSION,
            states: m.num_states,
            actions: m.num_actions,
            tasks: m.num_tasks,
            transition: m.transition.clone(),
            rewards: m.rewards.clone(),
            discount: m.discount,
            initial_dist: m.initial_dist.clone(),
            terminal: m.terminal.clone(),
        }
    }
}

/// Task-conditioned stochastic policy `π(a | s, i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub num_tasks: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// Dense `[task][s][a]`.
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(num_tasks: usize, num_states: usize, num_actions: usize) -> Self {
        TabularPolicy {
            num_tasks,
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_tasks * num_states * num_actions],
        }
    }

    /// Deterministic policy from `actions[task][state]`.
    pub fn deterministic(num_actions: usize, actions: &[Vec<usize>]) -> Self {
        let num_tasks = actions.len();
        let num_states = actions.first().map_or(0, Vec::len);
        let mut probs = vec![0.0; num_tasks * num_states * num_actions];
        for (task, row) in actions.iter().enumerate() {
            for (state, &a) in row.iter().enumerate() {
                probs[(task * num_states + state) * num_actions + a] = 1.0;
            }
        }
        TabularPolicy {
            num_tasks,
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn from_probs(
        num_tasks: usize,
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        let policy = TabularPolicy {
            num_tasks,
            num_states,
            num_actions,
            probs,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.num_tasks * self.num_states * self.num_actions {
            return Err(CdsError::InvalidPolicy("shape mismatch".into()));
        }
        for task in 0..self.num_tasks {
            for state in 0..self.num_states {
                if !on_simplex(self.row(task, state)) {
                    return Err(CdsError::InvalidPolicy(format!(
                        "row (task={task}, s={state}) is not on the simplex"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn row(&self, task: usize, state: usize) -> &[f64] {
        let start = (task * self.num_states + state) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    #[inline]
    pub fn row_mut(&mut self, task: usize, state: usize) -> &mut [f64] {
        let start = (task * self.num_states + state) * self.num_actions;
        &mut self.probs[start..start + self.num_actions]
    }

    #[inline]
    pub fn prob(&self, task: usize, state: usize, action: usize) -> f64 {
        self.row(task, state)[action]
    }

    /// Copy with uniform rows appended so the policy covers `num_states` states.
    pub fn padded(&self, num_states: usize) -> TabularPolicy {
        if num_states <= self.num_states {
            return self.clone();
        }
        let mut out = TabularPolicy::uniform(self.num_tasks, num_states, self.num_actions);
        for task in 0..self.num_tasks {
            for state in 0..self.num_states {
                out.row_mut(task, state)
                    .copy_from_slice(self.row(task, state));
            }
        }
        out
    }

    /// Single-task slice of this policy, re-indexed as task 0.
    pub fn task_slice(&self, task: usize) -> TabularPolicy {
        let n = self.num_states * self.num_actions;
        TabularPolicy {
            num_tasks: 1,
            num_states: self.num_states,
            num_actions: self.num_actions,
            probs: self.probs[task * n..(task + 1) * n].to_vec(),
        }
    }

    /// Pointwise mixture `λ self + (1 - λ) other`.
    pub fn mix(&self, other: &TabularPolicy, lambda: f64) -> TabularPolicy {
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| lambda * p + (1.0 - lambda) * q)
            .collect();
        TabularPolicy {
            probs,
            ..self.clone()
        }
    }
}

fn policy_task_index(mdp: &MultiTaskMdp, policy: &TabularPolicy, task: usize) -> Result<usize> {
    if task >= mdp.num_tasks {
        return Err(CdsError::OutOfRange(format!("task {task}")));
    }
    if policy.num_states != mdp.num_states || policy.num_actions != mdp.num_actions {
        return Err(CdsError::InvalidPolicy(format!(
            "policy shape ({} states, {} actions) does not match MDP ({}, {})",
            policy.num_states, policy.num_actions, mdp.num_states, mdp.num_actions
        )));
    }
    // Single-task policies may be evaluated on any task.
    if policy.num_tasks == 1 {
        Ok(0)
    } else if task < policy.num_tasks {
        Ok(task)
    } else {
        Err(CdsError::OutOfRange(format!("policy has no task {task}")))
    }
}

/// Expected reward and masked state-to-state kernel under `policy`.
fn policy_kernel(mdp: &MultiTaskMdp, policy: &TabularPolicy, task: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let pt = policy_task_index(mdp, policy, task)?;
    let n = mdp.num_states;
    let mut reward = vec![0.0; n];
    let mut kernel = vec![0.0; n * n];
    for s in 0..n {
        let row = policy.row(pt, s);
        let cont = if mdp.is_terminal(task, s) { 0.0 } else { 1.0 };
        for (a, &pa) in row.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            reward[s] += pa * mdp.reward(task, s, a);
            if cont > 0.0 {
                for (sn, &p) in mdp.next_dist(s, a).iter().enumerate() {
                    kernel[s * n + sn] += pa * p;
                }
            }
        }
    }
    Ok((reward, kernel))
}

/// State values `V^π` by a dense LU solve of `(I - γ M_π) V = r_π`.
pub fn state_values_direct(mdp: &MultiTaskMdp, policy: &TabularPolicy, task: usize) -> Result<Vec<f64>> {
    let (reward, kernel) = policy_kernel(mdp, policy, task)?;
    let n = mdp.num_states;
    let g = mdp.discount;
    let a = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - g * kernel[i * n + j]
    });
    let b = DVector::from_vec(reward);
    let v = a.lu().solve(&b).ok_or(CdsError::Singular)?;
    Ok(v.iter().copied().collect())
}

/// State values `V^π` by fixed-point iteration to `tol` in the sup norm.
pub fn state_values_iterative(
    mdp: &MultiTaskMdp,
    policy: &TabularPolicy,
    task: usize,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let (reward, kernel) = policy_kernel(mdp, policy, task)?;
    let n = mdp.num_states;
    let g = mdp.discount;
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        residual = 0.0;
        for s in 0..n {
            let row = &kernel[s * n..(s + 1) * n];
            let ev: f64 = row.iter().zip(&v).map(|(p, x)| p * x).sum();
            next[s] = reward[s] + g * ev;
            residual = f64::max(residual, (next[s] - v[s]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        if residual <= tol {
            return Ok(v);
        }
    }
    Err(CdsError::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

/// State values, using the direct solver for small MDPs and iteration otherwise.
pub fn state_values(mdp: &MultiTaskMdp, policy: &TabularPolicy, task: usize) -> Result<Vec<f64>> {
    if mdp.num_states <= DIRECT_SOLVE_MAX_STATES {
        state_values_direct(mdp, policy, task)
    } else {
        state_values_iterative(mdp, policy, task, ITERATIVE_TOL, ITERATIVE_MAX_ITERS)
    }
}

/// Expected discounted return `J(π) = Σ_s μ0(s) V^π(s)` on `task`.
pub fn exact_policy_evaluation(mdp: &MultiTaskMdp, policy: &TabularPolicy, task: usize) -> Result<f64> {
    let v = state_values(mdp, policy, task)?;
    Ok(mdp.initial_dist.iter().zip(&v).map(|(p, x)| p * x).sum())
}

/// One-step lookahead `R(s,a) + γ (1 - term(s)) Σ P(s'|s,a) V(s')`, dense `[s][a]`.
pub fn q_from_values(mdp: &MultiTaskMdp, task: usize, values: &[f64]) -> Vec<f64> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        let cont = if mdp.is_terminal(task, s) { 0.0 } else { mdp.discount };
        for a in 0..na {
            let ev: f64 = mdp
                .next_dist(s, a)
                .iter()
                .zip(values)
                .map(|(p, v)| p * v)
                .sum();
            q[s * na + a] = mdp.reward(task, s, a) + cont * ev;
        }
    }
    q
}

/// Optimal values of one task.
#[derive(Clone, Debug)]
pub struct OptimalSolution {
    pub values: Vec<f64>,
    /// Dense `[s][a]`.
    pub q: Vec<f64>,
    pub iterations: usize,
}

impl OptimalSolution {
    pub fn j_star(&self, mdp: &MultiTaskMdp) -> f64 {
        mdp.initial_dist
            .iter()
            .zip(&self.values)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Actions within `tol` of the maximum at `state`.
    pub fn optimal_actions(&self, num_actions: usize, state: usize, tol: f64) -> Vec<usize> {
        let row = &self.q[state * num_actions..(state + 1) * num_actions];
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..num_actions).filter(|a| row[*a] >= best - tol).collect()
    }

    /// Greedy deterministic actions, ties to the lowest index.
    pub fn greedy_actions(&self, num_actions: usize) -> Vec<usize> {
        self.q
            .chunks(num_actions)
            .map(argmax_lowest)
            .collect()
    }
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Value iteration to sup-norm tolerance `tol`.
pub fn value_iteration(mdp: &MultiTaskMdp, task: usize, tol: f64) -> Result<OptimalSolution> {
    if task >= mdp.num_tasks {
        return Err(CdsError::OutOfRange(format!("task {task}")));
    }
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut v = vec![0.0; ns];
    for it in 1..=ITERATIVE_MAX_ITERS {
        let q = q_from_values(mdp, task, &v);
        let mut residual: f64 = 0.0;
        let next: Vec<f64> = q
            .chunks(na)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for s in 0..ns {
            residual = residual.max((next[s] - v[s]).abs());
        }
        v = next;
        if residual <= tol {
            let q = q_from_values(mdp, task, &v);
            return Ok(OptimalSolution {
                values: v,
                q,
                iterations: it,
            });
        }
    }
    Err(CdsError::NoConvergence {
        iterations: ITERATIVE_MAX_ITERS,
        residual: f64::NAN,
    })
}

/// Discounted, `(1-γ)`-normalized state visitation of one task.
///
/// Mass that leaves the chain through a terminal state is kept in `absorbed`, so
/// `Σ dist + absorbed = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub task: usize,
    pub dist: Vec<f64>,
    pub absorbed: f64,
}

impl OccupancyMeasure {
    pub fn total_mass(&self) -> f64 {
        self.dist.iter().sum::<f64>() + self.absorbed
    }

    /// Normalized weights over states, used when an occupancy stands in for a
    /// sampling distribution.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.dist.iter().sum();
        if total <= 0.0 {
            return vec![0.0; self.dist.len()];
        }
        self.dist.iter().map(|d| d / total).collect()
    }

    /// Empirical state distribution of a set of visited states.
    pub fn from_state_counts(task: usize, counts: &[f64]) -> Self {
        let total: f64 = counts.iter().sum();
        let dist = if total > 0.0 {
            counts.iter().map(|c| c / total).collect()
        } else {
            vec![0.0; counts.len()]
        };
        OccupancyMeasure {
            task,
            dist,
            absorbed: 0.0,
        }
    }
}

pub fn state_occupancy(mdp: &MultiTaskMdp, policy: &TabularPolicy, task: usize) -> Result<OccupancyMeasure> {
    let (_, kernel) = policy_kernel(mdp, policy, task)?;
    let n = mdp.num_states;
    let g = mdp.discount;
    // (I - γ M)^T d = (1 - γ) μ0
    let a = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - g * kernel[j * n + i]
    });
    let b = DVector::from_iterator(n, mdp.initial_dist.iter().map(|p| (1.0 - g) * p));
    let d = a.lu().solve(&b).ok_or(CdsError::Singular)?;
    let dist: Vec<f64> = d.iter().map(|x| x.max(0.0)).collect();
    let absorbed = (1.0 - dist.iter().sum::<f64>()).max(0.0);
    Ok(OccupancyMeasure {
        task,
        dist,
        absorbed,
    })
}

/// MDP induced by the transitions of a dataset.
///
/// Observed `(s, a)` rows carry empirical next-state frequencies and the base
/// reward. When some `(s, a)` is unobserved, one extra absorbing zero-reward
/// state is appended and every unobserved pair routes to it with reward 0.
pub fn empirical_mdp(transitions: &[Transition], base: &MultiTaskMdp) -> Result<MultiTaskMdp> {
    if transitions.is_empty() {
        return Err(CdsError::EmptyDataset("empirical MDP needs at least one transition".into()));
    }
    let (ns, na) = (base.num_states, base.num_actions);
    let mut counts = vec![0u64; ns * na * ns];
    let mut visits = vec![0u64; ns * na];
    for t in transitions {
        if t.s >= ns || t.a >= na || t.s_next >= ns {
            return Err(CdsError::OutOfRange(format!(
                "transition ({}, {}, {}) outside MDP",
                t.s, t.a, t.s_next
            )));
        }
        counts[(t.s * na + t.a) * ns + t.s_next] += 1;
        visits[t.s * na + t.a] += 1;
    }
    let needs_absorbing = visits.contains(&0);
    let out_ns = if needs_absorbing { ns + 1 } else { ns };
    let absorbing = ns;

    let mut transition = vec![0.0; out_ns * na * out_ns];
    let mut rewards = vec![0.0; base.num_tasks * out_ns * na];
    for s in 0..ns {
        for a in 0..na {
            let row = &mut transition[(s * na + a) * out_ns..(s * na + a + 1) * out_ns];
            let n = visits[s * na + a];
            if n == 0 {
                row[absorbing] = 1.0;
            } else {
                for sn in 0..ns {
                    row[sn] = counts[(s * na + a) * ns + sn] as f64 / n as f64;
                }
            }
            for task in 0..base.num_tasks {
                rewards[(task * out_ns + s) * na + a] = if n == 0 { 0.0 } else { base.reward(task, s, a) };
            }
        }
    }
    if needs_absorbing {
        for a in 0..na {
            transition[(absorbing * na + a) * out_ns + absorbing] = 1.0;
        }
    }
    let mut initial_dist = base.initial_dist.clone();
    let mut terminal = Vec::with_capacity(base.num_tasks * out_ns);
    for task in 0..base.num_tasks {
        terminal.extend((0..ns).map(|s| base.is_terminal(task, s)));
        if needs_absorbing {
            terminal.push(false);
        }
    }
    if needs_absorbing {
        initial_dist.push(0.0);
    }
    // Row sums are exact count ratios; rebuild without re-validation noise.
    Ok(MultiTaskMdp {
        num_states: out_ns,
        num_actions: na,
        num_tasks: base.num_tasks,
        transition,
        rewards,
        discount: base.discount,
        initial_dist,
        terminal,
    })
}
