//! Conservative tabular offline learners and the multi-task training loop.
//!
//! Both learners run fitted iteration over per-task effective datasets. A
//! sweep freezes the current table and policy, forms sample-based targets from
//! the recorded successors and moves every entry toward its target by the
//! learning rate. The CQL variant minimizes, per task,
//!
//! ```text
//! Σ_j w_j (Q(s_j,a_j) - y_j)² / 2 + β (Σ_j w_j E_{a~μ}[Q(s_j,a)] - Σ_j w_j Q(s_j,a_j))
//! ```
//!
//! whose stationary point at a seen pair is `ȳ_w(s,a) - β (n_w(s) μ(a|s) / W(s,a) - 1)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{kl_policy_divergence, DivergenceReport};
use crate::dataset::{TaskDataset, Transition};
use crate::error::{CdsError, Result};
use crate::mdp::{argmax_lowest, exact_policy_evaluation, MultiTaskMdp, OccupancyMeasure, TabularPolicy};
use crate::rng::{child_seed, rng_from};
use crate::sharing::{
    build_effective_dataset, AdaptiveTemperature, AdmissionRecord, EffectiveDataset, SharingState, SharingStrategy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuMode {
    Uniform,
    SoftmaxOfQ,
    CurrentPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Cql,
    Brac,
}

/// Which transitions carry soft CDS weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    RelabeledOnly,
    /// Original data is weighted too, for each task with probability 1/2 per round.
    RelabeledPlusHalfOriginal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    FullBatch,
    /// Per task: half the batch from `D_i`, half from the relabeled data.
    Stratified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub learning_rate: f64,
    /// Sweeps of a standalone fit.
    pub iterations: usize,
    pub beta: f64,
    pub alpha: f64,
    pub mu_mode: MuMode,
    pub mu_temperature: f64,
    /// 0 means greedy with ties to the lowest action index.
    pub policy_temperature: f64,
    pub batch_size: usize,
    pub weight_rule: WeightRule,
    pub sweep_mode: SweepMode,
    /// Sweeps on the unshared datasets before the first sharing round.
    pub warmup_sweeps: usize,
    pub rounds: usize,
    /// Sweeps between effective-dataset rebuilds.
    pub inner_sweeps: usize,
    pub kl_max: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            kind: LearnerKind::Cql,
            learning_rate: 0.5,
            iterations: 300,
            beta: 1.0,
            alpha: 0.0,
            mu_mode: MuMode::SoftmaxOfQ,
            mu_temperature: 1.0,
            policy_temperature: 0.0,
            batch_size: 128,
            weight_rule: WeightRule::RelabeledOnly,
            sweep_mode: SweepMode::FullBatch,
            warmup_sweeps: 100,
            rounds: 20,
            inner_sweeps: 10,
            kl_max: 20.0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(CdsError::config("learner.learning_rate", "must lie in (0, 1]"));
        }
        if !nonneg(self.beta) {
            return Err(CdsError::config("learner.beta", "must be a nonnegative number"));
        }
        if !nonneg(self.alpha) {
            return Err(CdsError::config("learner.alpha", "must be a nonnegative number"));
        }
        if !(self.mu_temperature.is_finite() && self.mu_temperature > 0.0) {
            return Err(CdsError::config("learner.mu_temperature", "must be positive"));
        }
        if !nonneg(self.policy_temperature) {
            return Err(CdsError::config("learner.policy_temperature", "must be nonnegative"));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(CdsError::config("learner.batch_size", "must be a positive even number"));
        }
        if self.inner_sweeps == 0 {
            return Err(CdsError::config("learner.inner_sweeps", "must be positive"));
        }
        if !(self.kl_max.is_finite() && self.kl_max > 0.0) {
            return Err(CdsError::config("learner.kl_max", "must be positive"));
        }
        Ok(())
    }
}

/// Sizes and reward range a learner needs; the learner never sees dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemDims {
    pub num_tasks: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl ProblemDims {
    pub fn from_mdp(mdp: &MultiTaskMdp) -> Self {
        ProblemDims {
            num_tasks: mdp.num_tasks,
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            discount: mdp.discount,
            r_min: mdp.r_min(),
            r_max: mdp.r_max(),
        }
    }

    /// Upper divergence cap `R_max / (1 - γ) + 1`.
    pub fn q_cap(&self) -> f64 {
        self.r_max / (1.0 - self.discount) + 1.0
    }

    /// Value assigned to state-action pairs with no data.
    pub fn q_floor(&self) -> f64 {
        self.r_min.min(0.0) / (1.0 - self.discount)
    }
}

/// Count-based behavior policy `π_β(a|s,i) = |D_i(s,a)| / |D_i(s)|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalBehaviorPolicy {
    pub num_tasks: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// Dense `[task][s][a]`; weighted counts when the data carries soft weights.
    pub counts: Vec<f64>,
    /// Dense `[task][s][a]`; zero rows at unobserved states.
    pub probs: Vec<f64>,
    /// Dense `[task][s]`.
    pub observed: Vec<bool>,
}

impl EmpiricalBehaviorPolicy {
    /// Builds the estimate from `(s, a, weight)` triples per task.
    pub fn from_weighted<I>(num_states: usize, num_actions: usize, per_task: Vec<I>) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let num_tasks = per_task.len();
        let mut counts = vec![0.0; num_tasks * num_states * num_actions];
        for (task, items) in per_task.into_iter().enumerate() {
            let mut any = false;
            for (s, a, w) in items {
                if s >= num_states || a >= num_actions {
                    return Err(CdsError::OutOfRange(format!("(s={s}, a={a}) in task {task} data")));
                }
                counts[(task * num_states + s) * num_actions + a] += w;
                any = true;
            }
            if !any {
                return Err(CdsError::EmptyDataset(format!("task {task} has no transitions")));
            }
        }
        let mut probs = vec![0.0; counts.len()];
        let mut observed = vec![false; num_tasks * num_states];
        for ts in 0..num_tasks * num_states {
            let row = &counts[ts * num_actions..(ts + 1) * num_actions];
            let n: f64 = row.iter().sum();
            if n > 0.0 {
                observed[ts] = true;
                for a in 0..num_actions {
                    probs[ts * num_actions + a] = row[a] / n;
                }
            }
        }
        Ok(EmpiricalBehaviorPolicy {
            num_tasks,
            num_states,
            num_actions,
            counts,
            probs,
            observed,
        })
    }

    pub fn row(&self, task: usize, state: usize) -> &[f64] {
        let start = (task * self.num_states + state) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn counts_row(&self, task: usize, state: usize) -> &[f64] {
        let start = (task * self.num_states + state) * self.num_actions;
        &self.counts[start..start + self.num_actions]
    }

    pub fn is_observed(&self, task: usize, state: usize) -> bool {
        self.observed[task * self.num_states + state]
    }

    /// `|D_i(s)|` for every state.
    pub fn state_counts(&self, task: usize) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| self.counts_row(task, s).iter().sum())
            .collect()
    }

    /// Empirical state distribution of task `task`'s data.
    pub fn state_distribution(&self, task: usize) -> OccupancyMeasure {
        OccupancyMeasure::from_state_counts(task, &self.state_counts(task))
    }

    /// As a policy, with uniform rows at unobserved states.
    pub fn to_policy(&self) -> TabularPolicy {
        let mut p = TabularPolicy::uniform(self.num_tasks, self.num_states, self.num_actions);
        for task in 0..self.num_tasks {
            for s in 0..self.num_states {
                if self.is_observed(task, s) {
                    p.row_mut(task, s).copy_from_slice(self.row(task, s));
                }
            }
        }
        p
    }
}

pub fn estimate_behavior_policy(datasets: &[TaskDataset], num_states: usize, num_actions: usize) -> Result<EmpiricalBehaviorPolicy> {
    EmpiricalBehaviorPolicy::from_weighted(
        num_states,
        num_actions,
        datasets
            .iter()
            .map(|d| d.transitions.iter().map(|t| (t.s, t.a, 1.0)).collect::<Vec<_>>())
            .collect(),
    )
}

pub fn estimate_effective_behavior(datasets: &[EffectiveDataset], num_states: usize, num_actions: usize) -> Result<EmpiricalBehaviorPolicy> {
    EmpiricalBehaviorPolicy::from_weighted(
        num_states,
        num_actions,
        datasets
            .iter()
            .map(|d| {
                d.transitions
                    .iter()
                    .zip(&d.weights)
                    .map(|(t, w)| (t.s, t.a, *w))
                    .collect::<Vec<_>>()
            })
            .collect(),
    )
}

/// Learned `Q̂(s,a,i)` with the coefficients that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservativeQTable {
    pub num_tasks: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// Dense `[task][s][a]`.
    pub q: Vec<f64>,
    /// Per-state divergence penalty `α KL(π‖π_β)`, dense `[task][s]`; zero for CQL.
    pub penalty: Vec<f64>,
    pub beta: f64,
    pub alpha: f64,
    pub mu_mode: MuMode,
    pub learner: LearnerKind,
    /// States whose KL hit the clamp in the last sweep.
    pub kl_clamped: usize,
}

impl ConservativeQTable {
    pub fn zeros(dims: &ProblemDims, cfg: &LearnerConfig) -> Self {
        ConservativeQTable {
            num_tasks: dims.num_tasks,
            num_states: dims.num_states,
            num_actions: dims.num_actions,
            q: vec![0.0; dims.num_tasks * dims.num_states * dims.num_actions],
            penalty: vec![0.0; dims.num_tasks * dims.num_states],
            beta: cfg.beta,
            alpha: cfg.alpha,
            mu_mode: cfg.mu_mode,
            learner: cfg.kind,
            kl_clamped: 0,
        }
    }

    #[inline]
    pub fn get(&self, task: usize, state: usize, action: usize) -> f64 {
        self.q[(task * self.num_states + state) * self.num_actions + action]
    }

    pub fn row(&self, task: usize, state: usize) -> &[f64] {
        let start = (task * self.num_states + state) * self.num_actions;
        &self.q[start..start + self.num_actions]
    }

    /// `Q̂(s,a,i) - α KL(π(·|s,i) ‖ π_β(·|s,i))`; equal to `Q̂` for CQL tables.
    pub fn conservative(&self, task: usize, state: usize, action: usize) -> f64 {
        self.get(task, state, action) - self.penalty[task * self.num_states + state]
    }

    pub fn conservative_row(&self, task: usize, state: usize) -> Vec<f64> {
        let p = self.penalty[task * self.num_states + state];
        self.row(task, state).iter().map(|q| q - p).collect()
    }

    pub fn task_slice(&self, task: usize) -> &[f64] {
        let n = self.num_states * self.num_actions;
        &self.q[task * n..(task + 1) * n]
    }

    fn check_finite(&self, cap: f64) -> Result<()> {
        for (idx, v) in self.q.iter().enumerate() {
            if !v.is_finite() || *v > cap {
                let na = self.num_actions;
                let ns = self.num_states;
                return Err(CdsError::Divergence {
                    task: idx / (ns * na),
                    state: (idx / na) % ns,
                    action: idx % na,
                    value: *v,
                    cap,
                });
            }
        }
        Ok(())
    }
}

/// Softmax of `row / temperature`; temperature 0 is greedy with the lowest
/// index winning ties.
pub fn softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    if temperature <= 0.0 {
        out[argmax_lowest(row)] = 1.0;
        return out;
    }
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = ((v - m) / temperature).exp();
        z += *o;
    }
    for o in &mut out {
        *o /= z;
    }
    out
}

pub fn extract_policy(q: &ConservativeQTable, temperature: f64) -> TabularPolicy {
    let mut p = TabularPolicy::uniform(q.num_tasks, q.num_states, q.num_actions);
    for task in 0..q.num_tasks {
        for s in 0..q.num_states {
            let row = softmax_row(q.row(task, s), temperature);
            p.row_mut(task, s).copy_from_slice(&row);
        }
    }
    p
}

/// `KL(p ‖ q)` clamped at `kl_max`; the flag reports whether `p` has mass where `q` has none.
pub fn clamped_kl(p: &[f64], q: &[f64], kl_max: f64) -> (f64, bool) {
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return (kl_max, true);
            }
            kl += pi * (pi / qi).ln();
        }
    }
    if kl > kl_max {
        (kl_max, true)
    } else {
        (kl.max(0.0), false)
    }
}

/// BRAC policy: softmax (or argmax) of `Q(s,a) - α min(-ln π_β(a|s), KL_max)`.
pub fn brac_policy(
    q: &ConservativeQTable,
    behavior: &EmpiricalBehaviorPolicy,
    alpha: f64,
    temperature: f64,
    kl_max: f64,
) -> TabularPolicy {
    let mut p = TabularPolicy::uniform(q.num_tasks, q.num_states, q.num_actions);
    for task in 0..q.num_tasks {
        for s in 0..q.num_states {
            let scores: Vec<f64> = if behavior.is_observed(task, s) && alpha > 0.0 {
                q.row(task, s)
                    .iter()
                    .zip(behavior.row(task, s))
                    .map(|(v, pb)| {
                        let kl = if *pb > 0.0 { (-pb.ln()).min(kl_max) } else { kl_max };
                        v - alpha * kl
                    })
                    .collect()
            } else {
                q.row(task, s).to_vec()
            };
            p.row_mut(task, s).copy_from_slice(&softmax_row(&scores, temperature));
        }
    }
    p
}

/// Weighted sufficient statistics of one task's data.
#[derive(Clone, Debug)]
struct TaskStats {
    /// `W(s,a)`.
    w: Vec<f64>,
    /// `Σ w r` per (s, a).
    rw: Vec<f64>,
    /// `Σ w (1 - done)` per (s, a, s'), sparse.
    succ: Vec<Vec<(usize, f64)>>,
    /// `n_w(s)`.
    n: Vec<f64>,
}

impl TaskStats {
    fn build<'a>(ns: usize, na: usize, items: impl Iterator<Item = (&'a Transition, f64)>) -> Self {
        let mut w = vec![0.0; ns * na];
        let mut rw = vec![0.0; ns * na];
        let mut succ: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns * na];
        let mut n = vec![0.0; ns];
        for (t, weight) in items {
            let idx = t.s * na + t.a;
            w[idx] += weight;
            rw[idx] += weight * t.r;
            n[t.s] += weight;
            if !t.done {
                match succ[idx].iter_mut().find(|(sn, _)| *sn == t.s_next) {
                    Some(entry) => entry.1 += weight,
                    None => succ[idx].push((t.s_next, weight)),
                }
            }
        }
        for list in &mut succ {
            list.sort_by_key(|(sn, _)| *sn);
        }
        TaskStats { w, rw, succ, n }
    }
}

fn check_data(dims: &ProblemDims, data: &[EffectiveDataset]) -> Result<()> {
    if data.len() != dims.num_tasks {
        return Err(CdsError::InvalidSpec(format!(
            "{} datasets for {} tasks",
            data.len(),
            dims.num_tasks
        )));
    }
    for (i, d) in data.iter().enumerate() {
        if d.transitions.is_empty() {
            return Err(CdsError::EmptyDataset(format!("task {i}")));
        }
        if d.weights.len() != d.transitions.len() {
            return Err(CdsError::InvalidSpec(format!("task {i}: weight count mismatch")));
        }
        for t in &d.transitions {
            if t.s >= dims.num_states || t.s_next >= dims.num_states || t.a >= dims.num_actions {
                return Err(CdsError::OutOfRange(format!(
                    "transition ({}, {}, {}) in task {i}",
                    t.s, t.a, t.s_next
                )));
            }
        }
    }
    Ok(())
}

/// Stateful fitted-iteration learner; the training loop calls [`Learner::run`]
/// once per round so the table carries over between rebuilds.
pub struct Learner {
    pub dims: ProblemDims,
    pub cfg: LearnerConfig,
    pub table: ConservativeQTable,
    rng: ChaCha8Rng,
    /// Behavior estimate of the data seen in the last run, for BRAC policies.
    behavior: Option<EmpiricalBehaviorPolicy>,
    pub sweeps_done: usize,
}

impl Learner {
    pub fn new(dims: ProblemDims, cfg: LearnerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Learner {
            table: ConservativeQTable::zeros(&dims, &cfg),
            dims,
            cfg,
            rng: rng_from(seed),
            behavior: None,
            sweeps_done: 0,
        })
    }

    pub fn policy(&self) -> TabularPolicy {
        match (self.cfg.kind, &self.behavior) {
            (LearnerKind::Brac, Some(b)) => brac_policy(&self.table, b, self.cfg.alpha, self.cfg.policy_temperature, self.cfg.kl_max),
            _ => extract_policy(&self.table, self.cfg.policy_temperature),
        }
    }

    pub fn run(&mut self, data: &[EffectiveDataset], sweeps: usize) -> Result<()> {
        check_data(&self.dims, data)?;
        let (ns, na) = (self.dims.num_states, self.dims.num_actions);
        self.behavior = Some(estimate_effective_behavior(data, ns, na)?);
        let full: Vec<TaskStats> = data
            .iter()
            .map(|d| TaskStats::build(ns, na, d.transitions.iter().zip(d.weights.iter().copied())))
            .collect();
        for _ in 0..sweeps {
            let stats: Vec<TaskStats> = match self.cfg.sweep_mode {
                SweepMode::FullBatch => full.clone(),
                SweepMode::Stratified => data.iter().map(|d| self.sample_batch(d)).collect(),
            };
            let restrict = self.cfg.sweep_mode == SweepMode::Stratified;
            let change = self.sweep(&stats, restrict);
            self.sweeps_done += 1;
            self.table.check_finite(self.dims.q_cap())?;
            if !restrict && change <= 1e-13 {
                break;
            }
        }
        Ok(())
    }

    fn sample_batch(&mut self, d: &EffectiveDataset) -> TaskStats {
        let (ns, na) = (self.dims.num_states, self.dims.num_actions);
        let original: Vec<usize> = (0..d.len()).filter(|&k| d.transitions[k].origin_task == d.task).collect();
        let relabeled: Vec<usize> = (0..d.len()).filter(|&k| d.transitions[k].origin_task != d.task).collect();
        let half = self.cfg.batch_size / 2;
        let mut picks = Vec::with_capacity(self.cfg.batch_size);
        let pools: [(&Vec<usize>, usize); 2] = if relabeled.is_empty() {
            [(&original, 2 * half), (&relabeled, 0)]
        } else if original.is_empty() {
            [(&original, 0), (&relabeled, 2 * half)]
        } else {
            [(&original, half), (&relabeled, half)]
        };
        for (pool, count) in pools {
            for _ in 0..count {
                picks.push(pool[self.rng.gen_range(0..pool.len())]);
            }
        }
        TaskStats::build(ns, na, picks.into_iter().map(|k| (&d.transitions[k], d.weights[k])))
    }

    /// One synchronous sweep; returns the largest absolute change.
    fn sweep(&mut self, stats: &[TaskStats], restrict: bool) -> f64 {
        let (ns, na) = (self.dims.num_states, self.dims.num_actions);
        let g = self.dims.discount;
        let floor = self.dims.q_floor();
        let lr = self.cfg.learning_rate;
        let policy = self.policy();
        let old = self.table.clone();
        let mut change: f64 = 0.0;
        let mut clamped = 0;
        for (task, st) in stats.iter().enumerate() {
            // successor values under the frozen policy
            let mut v = vec![0.0; ns];
            for s in 0..ns {
                let pi = policy.row(task, s);
                let ev: f64 = pi.iter().zip(old.row(task, s)).map(|(p, q)| p * q).sum();
                v[s] = match self.cfg.kind {
                    LearnerKind::Cql => ev,
                    LearnerKind::Brac => {
                        let kl = if self.cfg.alpha > 0.0 {
                            let uniform = vec![1.0 / na as f64; na];
                            let pb = match &self.behavior {
                                Some(b) if b.is_observed(task, s) => b.row(task, s),
                                _ => &uniform[..],
                            };
                            let (kl, hit) = clamped_kl(pi, pb, self.cfg.kl_max);
                            if hit {
                                clamped += 1;
                            }
                            kl
                        } else {
                            0.0
                        };
                        self.table.penalty[task * ns + s] = self.cfg.alpha * kl;
                        ev - self.cfg.alpha * kl
                    }
                };
            }
            for s in 0..ns {
                if restrict && st.n[s] <= 0.0 {
                    continue;
                }
                let mu = self.mu_row(&old, &policy, task, s);
                let mut targets = vec![f64::NAN; na];
                let mut seen_min = f64::INFINITY;
                for a in 0..na {
                    let idx = s * na + a;
                    let w = st.w[idx];
                    if w <= 0.0 {
                        continue;
                    }
                    let boot: f64 = st.succ[idx].iter().map(|(sn, ws)| ws * v[*sn]).sum();
                    let ybar = (st.rw[idx] + g * boot) / w;
                    let t = match self.cfg.kind {
                        LearnerKind::Cql => ybar - self.cfg.beta * (st.n[s] * mu[a] / w - 1.0),
                        LearnerKind::Brac => ybar,
                    };
                    targets[a] = t;
                    seen_min = seen_min.min(t);
                }
                let unseen = if st.n[s] > 0.0 {
                    let pen = match self.cfg.kind {
                        LearnerKind::Cql => self.cfg.beta,
                        LearnerKind::Brac => 0.0,
                    };
                    floor.min(seen_min) - pen
                } else {
                    floor
                };
                for a in 0..na {
                    let t = if targets[a].is_nan() { unseen } else { targets[a] };
                    let idx = (task * ns + s) * na + a;
                    let delta = lr * (t - old.q[idx]);
                    self.table.q[idx] = old.q[idx] + delta;
                    change = change.max(delta.abs());
                }
            }
        }
        self.table.kl_clamped = clamped;
        change
    }

    fn mu_row(&self, q: &ConservativeQTable, policy: &TabularPolicy, task: usize, s: usize) -> Vec<f64> {
        let na = self.dims.num_actions;
        match self.cfg.mu_mode {
            MuMode::Uniform => vec![1.0 / na as f64; na],
            MuMode::SoftmaxOfQ => softmax_row(q.row(task, s), self.cfg.mu_temperature),
            MuMode::CurrentPolicy => policy.row(task, s).to_vec(),
        }
    }
}

/// CQL-penalized fitted Q iteration for `cfg.iterations` sweeps.
pub fn cql_fitted_iteration(dims: &ProblemDims, data: &[EffectiveDataset], cfg: &LearnerConfig, seed: u64) -> Result<ConservativeQTable> {
    let cfg = LearnerConfig {
        kind: LearnerKind::Cql,
        ..cfg.clone()
    };
    let iterations = cfg.iterations;
    let mut learner = Learner::new(*dims, cfg, seed)?;
    learner.run(data, iterations)?;
    Ok(learner.table)
}

/// KL-penalized fitted Q iteration; the returned table's `conservative` accessor
/// subtracts `α KL(π‖π_β)` at each state.
pub fn brac_fitted_iteration(
    dims: &ProblemDims,
    data: &[EffectiveDataset],
    cfg: &LearnerConfig,
    seed: u64,
) -> Result<(ConservativeQTable, TabularPolicy)> {
    let cfg = LearnerConfig {
        kind: LearnerKind::Brac,
        ..cfg.clone()
    };
    let iterations = cfg.iterations;
    let mut learner = Learner::new(*dims, cfg, seed)?;
    learner.run(data, iterations)?;
    let policy = learner.policy();
    Ok((learner.table, policy))
}

/// `E_{s~D}[E_π Q̂(s,·) - E_{π_β} Q̂(s,·)]` over the states of task `task`'s data.
pub fn conservatism_gap(q: &ConservativeQTable, policy: &TabularPolicy, behavior: &EmpiricalBehaviorPolicy, task: usize) -> f64 {
    let counts = behavior.state_counts(task);
    let total: f64 = counts.iter().sum();
    let mut gap = 0.0;
    for (s, n) in counts.iter().enumerate() {
        if *n <= 0.0 {
            continue;
        }
        let row = q.row(task, s);
        let e_pi: f64 = policy.row(task, s).iter().zip(row).map(|(p, v)| p * v).sum();
        let e_b: f64 = behavior.row(task, s).iter().zip(row).map(|(p, v)| p * v).sum();
        gap += n / total * (e_pi - e_b);
    }
    gap
}

/// One training-log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub task: usize,
    pub dataset_size: usize,
    pub admitted_fraction: f64,
    pub j_eval: f64,
    pub kl_div: f64,
}

pub const LOG_HEADER: &str = "round,task,dataset_size,admitted_fraction,J_eval,kl_div";

impl RoundLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round,
            self.task,
            self.dataset_size,
            crate::dataset::format_float(self.admitted_fraction),
            crate::dataset::format_float(self.j_eval),
            crate::dataset::format_float(self.kl_div)
        )
    }
}

pub fn log_to_csv(log: &[RoundLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub table: ConservativeQTable,
    pub policy: TabularPolicy,
    pub log: Vec<RoundLog>,
    /// Effective datasets of the final round.
    pub effective: Vec<EffectiveDataset>,
    pub behavior: EmpiricalBehaviorPolicy,
    /// Admission decisions of the final round.
    pub admissions: Vec<AdmissionRecord>,
    pub temperature: Option<AdaptiveTemperature>,
    pub divergence: Vec<DivergenceReport>,
}

fn log_round(
    mdp: &MultiTaskMdp,
    round: usize,
    policy: &TabularPolicy,
    effective: &[EffectiveDataset],
    admissions: &[AdmissionRecord],
) -> Result<(Vec<RoundLog>, EmpiricalBehaviorPolicy, Vec<DivergenceReport>)> {
    let behavior = estimate_effective_behavior(effective, mdp.num_states, mdp.num_actions)?;
    let mut rows = Vec::with_capacity(effective.len());
    let mut reports = Vec::with_capacity(effective.len());
    for (task, eff) in effective.iter().enumerate() {
        let candidates: Vec<&AdmissionRecord> = admissions.iter().filter(|r| r.target == task).collect();
        let admitted_fraction = if candidates.is_empty() {
            0.0
        } else {
            candidates.iter().filter(|r| r.admitted).map(|r| r.weight).sum::<f64>() / candidates.len() as f64
        };
        let occupancy = behavior.state_distribution(task);
        let report = kl_policy_divergence(policy, &behavior, &occupancy, task)?;
        rows.push(RoundLog {
            round,
            task,
            dataset_size: eff.len(),
            admitted_fraction,
            j_eval: exact_policy_evaluation(mdp, policy, task)?,
            kl_div: report.average,
        });
        reports.push(report);
    }
    Ok((rows, behavior, reports))
}

/// Alternates effective-dataset construction and learner sweeps.
///
/// The table is first fit on the unshared datasets for `warmup_sweeps` sweeps so
/// the first sharing decision is made with an informed Q̂. Each of the
/// `rounds` rounds then rebuilds every `D_i^eff` from the current table and
/// policy and runs `inner_sweeps` sweeps on it.
pub fn train_multitask(
    mdp: &MultiTaskMdp,
    raw: &[TaskDataset],
    strategy: &SharingStrategy,
    cfg: &LearnerConfig,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    strategy.validate(mdp.num_tasks)?;
    if raw.len() != mdp.num_tasks {
        return Err(CdsError::InvalidSpec(format!("{} datasets for {} tasks", raw.len(), mdp.num_tasks)));
    }
    for (i, d) in raw.iter().enumerate() {
        if d.task != i {
            return Err(CdsError::InvalidSpec(format!("dataset {i} is labeled task {}", d.task)));
        }
    }
    let dims = ProblemDims::from_mdp(mdp);
    let mut learner = Learner::new(dims, cfg.clone(), child_seed(seed, 0))?;
    let mut state = SharingState::new(strategy, mdp.num_tasks, cfg.weight_rule, child_seed(seed, 1));

    let mut effective: Vec<EffectiveDataset> = raw.iter().map(EffectiveDataset::original).collect();
    learner.run(&effective, cfg.warmup_sweeps)?;
    let mut policy = learner.policy();
    let (mut log, mut behavior, mut divergence) = log_round(mdp, 0, &policy, &effective, &[])?;
    let mut admissions = Vec::new();

    for round in 1..=cfg.rounds {
        effective.clear();
        admissions.clear();
        state.begin_round();
        for task in 0..mdp.num_tasks {
            let (eff, recs) = build_effective_dataset(strategy, &learner.table, &policy, raw, task, mdp, &mut state)?;
            effective.push(eff);
            admissions.extend(recs);
        }
        learner.run(&effective, cfg.inner_sweeps)?;
        policy = learner.policy();
        let (rows, b, d) = log_round(mdp, round, &policy, &effective, &admissions)?;
        log.extend(rows);
        behavior = b;
        divergence = d;
    }
    if cfg.rounds == 0 {
        admissions.clear();
    }
    Ok(TrainOutput {
        table: learner.table,
        policy,
        log,
        effective,
        behavior,
        admissions,
        temperature: state.temperature,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::value_iteration;

    fn chain() -> MultiTaskMdp {
        // 3-state deterministic chain, actions {stay, advance}; reward for advancing from s1
        let mut transition = vec![0.0; 3 * 2 * 3];
        for s in 0..3 {
            transition[(s * 2) * 3 + s] = 1.0;
            transition[(s * 2 + 1) * 3 + (s + 1).min(2)] = 1.0;
        }
        let rewards = vec![0.0, 0.0, 0.0, 1.0, 0.5, 0.0];
        MultiTaskMdp::new(3, 2, 1, transition, rewards, 0.9, vec![1.0, 0.0, 0.0], vec![false; 3]).unwrap()
    }

    fn exhaustive(mdp: &MultiTaskMdp, task: usize, copies: usize) -> EffectiveDataset {
        let mut ts = Vec::new();
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                let sn = mdp.next_dist(s, a).iter().position(|p| *p == 1.0).unwrap();
                for _ in 0..copies {
                    ts.push(Transition::new(s, a, mdp.reward(task, s, a), sn, mdp.is_terminal(task, s), task));
                }
            }
        }
        EffectiveDataset::original(&TaskDataset::new(task, ts, crate::dataset::DatasetQuality::Expert, 0, "exhaustive"))
    }

    fn oracle_cfg(beta: f64) -> LearnerConfig {
        LearnerConfig {
            learning_rate: 1.0,
            iterations: 400,
            beta,
            ..LearnerConfig::default()
        }
    }

    fn uneven(mdp: &MultiTaskMdp, counts: &[usize]) -> EffectiveDataset {
        let mut ts = Vec::new();
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                let sn = mdp.next_dist(s, a).iter().position(|p| *p == 1.0).unwrap();
                for _ in 0..counts[s * mdp.num_actions + a] {
                    ts.push(Transition::new(s, a, mdp.reward(0, s, a), sn, false, 0));
                }
            }
        }
        EffectiveDataset::original(&TaskDataset::new(0, ts, crate::dataset::DatasetQuality::Medium, 0, "uneven"))
    }

    proptest::proptest! {
        // E_pi Q >= E_beta Q whenever pi is greedy in Q, whatever beta is
        #[test]
        fn greedy_gap_is_never_negative(counts in proptest::collection::vec(0usize..4, 6), beta in 0.0f64..1.0) {
            let m = chain();
            let dims = ProblemDims::from_mdp(&m);
            proptest::prop_assume!(counts.iter().any(|c| *c > 0));
            let data = vec![uneven(&m, &counts)];
            let cfg = LearnerConfig { beta, iterations: 200, ..LearnerConfig::default() };
            let q = cql_fitted_iteration(&dims, &data, &cfg, 0).unwrap();
            let b = estimate_effective_behavior(&data, 3, 2).unwrap();
            proptest::prop_assert!(conservatism_gap(&q, &extract_policy(&q, 0.0), &b, 0) >= -1e-12);
        }
    }

    #[test]
    fn gap_identity_at_fixed_point() {
        // with mu = pi and every action seen: E_pi Q - E_beta Q = E_{pi - beta}[ybar] - beta * D_CQL(pi, pi_beta)
        let m = chain();
        let dims = ProblemDims::from_mdp(&m);
        let data = vec![uneven(&m, &[3, 1, 1, 2, 2, 5])];
        let beta = 0.3;
        let cfg = LearnerConfig {
            beta,
            learning_rate: 0.5,
            iterations: 5000,
            mu_mode: MuMode::CurrentPolicy,
            policy_temperature: 1.0,
            ..LearnerConfig::default()
        };
        let q = cql_fitted_iteration(&dims, &data, &cfg, 0).unwrap();
        let pi = extract_policy(&q, 1.0);
        let b = estimate_effective_behavior(&data, 3, 2).unwrap();
        let v: Vec<f64> = (0..3).map(|s| pi.row(0, s).iter().zip(q.row(0, s)).map(|(p, x)| p * x).sum()).collect();
        let mut expected = 0.0;
        let total: f64 = b.state_counts(0).iter().sum();
        for s in 0..3 {
            let (p, pb) = (pi.row(0, s), b.row(0, s));
            let mut diff = 0.0;
            let mut dcql = 0.0;
            for a in 0..2 {
                let sn = m.next_dist(s, a).iter().position(|x| *x == 1.0).unwrap();
                let ybar = m.reward(0, s, a) + m.discount * v[sn];
                diff += (p[a] - pb[a]) * ybar;
                dcql += p[a] * (p[a] / pb[a] - 1.0);
            }
            expected += b.state_counts(0)[s] / total * (diff - beta * dcql);
        }
        assert!((conservatism_gap(&q, &pi, &b, 0) - expected).abs() < 1e-8);
    }

    #[test]
    fn behavior_count_ratios() {
        let ts = vec![
            Transition::new(0, 0, 0.0, 0, false, 0),
            Transition::new(0, 0, 0.0, 0, false, 0),
            Transition::new(0, 0, 0.0, 0, false, 0),
            Transition::new(0, 1, 0.0, 0, false, 0),
            Transition::new(1, 1, 0.0, 0, false, 0),
        ];
        let ds = TaskDataset::new(0, ts, crate::dataset::DatasetQuality::Medium, 0, "t");
        let b = estimate_behavior_policy(&[ds], 3, 2).unwrap();
        assert_eq!(b.row(0, 0), &[0.75, 0.25]);
        assert_eq!(b.row(0, 1), &[0.0, 1.0]);
        assert!(!b.is_observed(0, 2));
        let empty = TaskDataset::new(0, vec![], crate::dataset::DatasetQuality::Medium, 0, "t");
        assert!(matches!(estimate_behavior_policy(&[empty], 3, 2), Err(CdsError::EmptyDataset(_))));
    }

    #[test]
    fn unpenalized_learners_recover_q_star() {
        let m = chain();
        let dims = ProblemDims::from_mdp(&m);
        let data = vec![exhaustive(&m, 0, 1)];
        let star = value_iteration(&m, 0, 1e-14).unwrap();
        let cql = cql_fitted_iteration(&dims, &data, &oracle_cfg(0.0), 0).unwrap();
        let (brac, _) = brac_fitted_iteration(&dims, &data, &oracle_cfg(0.0), 0).unwrap();
        for (i, v) in star.q.iter().enumerate() {
            assert!((cql.q[i] - v).abs() < 1e-6);
            assert!((brac.q[i] - v).abs() < 1e-6);
        }
    }

    #[test]
    fn penalty_cancels_when_mu_equals_behavior() {
        // exhaustive data with equal counts has a uniform behavior policy
        let m = chain();
        let dims = ProblemDims::from_mdp(&m);
        let data = vec![exhaustive(&m, 0, 3)];
        let base = cql_fitted_iteration(&dims, &data, &oracle_cfg(0.0), 0).unwrap();
        let cfg = LearnerConfig {
            mu_mode: MuMode::Uniform,
            ..oracle_cfg(5.0)
        };
        let pen = cql_fitted_iteration(&dims, &data, &cfg, 0).unwrap();
        for (a, b) in base.q.iter().zip(&pen.q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn brac_zero_alpha_matches_plain_fit() {
        let m = chain();
        let dims = ProblemDims::from_mdp(&m);
        let ts = vec![
            Transition::new(0, 1, 0.0, 1, false, 0),
            Transition::new(1, 1, 1.0, 2, false, 0),
            Transition::new(1, 0, 0.0, 1, false, 0),
            Transition::new(2, 0, 0.0, 2, false, 0),
        ];
        let data = vec![EffectiveDataset::original(&TaskDataset::new(0, ts, crate::dataset::DatasetQuality::Medium, 0, "t"))];
        let (brac, _) = brac_fitted_iteration(&dims, &data, &oracle_cfg(0.0), 0).unwrap();
        let cql = cql_fitted_iteration(&dims, &data, &oracle_cfg(0.0), 0).unwrap();
        assert_eq!(brac.q, cql.q);
        assert!(brac.penalty.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn brac_penalty_zero_when_policy_matches_behavior() {
        // single action per observed state: the greedy policy equals the behavior policy
        let m = chain();
        let dims = ProblemDims::from_mdp(&m);
        let ts = vec![
            Transition::new(0, 1, 0.0, 1, false, 0),
            Transition::new(1, 1, 1.0, 2, false, 0),
            Transition::new(2, 0, 0.0, 2, false, 0),
        ];
        let data = vec![EffectiveDataset::original(&TaskDataset::new(0, ts, crate::dataset::DatasetQuality::Medium, 0, "t"))];
        let cfg = LearnerConfig {
            alpha: 2.0,
            ..oracle_cfg(0.0)
        };
        let (brac, pi) = brac_fitted_iteration(&dims, &data, &cfg, 0).unwrap();
        for s in 0..3 {
            assert_eq!(brac.penalty[s], 0.0, "state {s}");
        }
        assert_eq!(pi.row(0, 0), &[0.0, 1.0]);
        assert!((brac.conservative(0, 1, 1) - brac.get(0, 1, 1)).abs() == 0.0);
        assert_eq!(brac.kl_clamped, 0);
    }

    #[test]
    fn policy_extraction_cases() {
        let mut t = ConservativeQTable::zeros(
            &ProblemDims {
                num_tasks: 1,
                num_states: 2,
                num_actions: 3,
                discount: 0.9,
                r_min: 0.0,
                r_max: 1.0,
            },
            &LearnerConfig::default(),
        );
        t.q = vec![0.5, 0.5, 0.5, 1.0, 2.0, 3.0];
        let p = extract_policy(&t, 1.0);
        for x in p.row(0, 0) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let g = extract_policy(&t, 1e-8);
        assert!(g.row(0, 1)[2] > 1.0 - 1e-12 && g.row(0, 1)[0] < 1e-12);
        assert_eq!(extract_policy(&t, 0.0).row(0, 0), &[1.0, 0.0, 0.0]);
        for s in 0..2 {
            assert!((p.row(0, s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_a_hard_error() {
        let m = chain();
        let mut dims = ProblemDims::from_mdp(&m);
        // understate the reward range so the true values exceed the cap
        dims.r_max = 0.01;
        let data = vec![exhaustive(&m, 0, 1)];
        assert!(matches!(
            cql_fitted_iteration(&dims, &data, &oracle_cfg(0.0), 0),
            Err(CdsError::Divergence { .. })
        ));
    }

    #[test]
    fn fits_are_deterministic() {
        let m = chain();
        let dims = ProblemDims::from_mdp(&m);
        let data = vec![exhaustive(&m, 0, 2)];
        let cfg = LearnerConfig {
            sweep_mode: SweepMode::Stratified,
            ..LearnerConfig::default()
        };
        let a = cql_fitted_iteration(&dims, &data, &cfg, 5).unwrap();
        let b = cql_fitted_iteration(&dims, &data, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn odd_batch_rejected() {
        let cfg = LearnerConfig {
            batch_size: 127,
            ..LearnerConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CdsError::Config { field, .. }) if field == "learner.batch_size"));
    }
}
